//! Periodic simplicial triangulations of the unit cube.
//!
//! The cube is cut into a `2^r x ... x 2^r` grid of subcubes and every subcube
//! is split into `N!` Kuhn simplices (for `N = 2`: two triangles along the
//! same diagonal). Nodes on opposite faces are identified, so the periodic
//! node classes form a `2^r`-periodic lattice with `2^(N r)` classes.
//!
//! All coordinates are kept as integers on the grid of spacing `1 / 2^r`, so
//! volumes, charts and normals are exact.

use std::collections::BTreeMap;

use num_integer::Integer;
use num_traits::{One, Signed, Zero};
use thiserror::Error;

use crate::linalg::{solve, Matrix};
use crate::scalar::{rat, Rational, Scalar};

/// Element count cap applied by [`build_unit_cube_triangulation`].
pub const DEFAULT_ELEMENT_CAP: usize = 50_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("unsupported dimension {0}; only N = 2 and N = 3 are built")]
    UnsupportedDimension(usize),
    #[error("triangulation would have {elements} elements, above the cap of {cap}")]
    TooLarge { elements: usize, cap: usize },
    #[error("node {node} does not exist (mesh has {count} periodic nodes)")]
    InvalidNode { node: usize, count: usize },
    #[error("element {0} is degenerate")]
    Degenerate(usize),
    #[error("malformed triangulation payload: {0}")]
    Malformed(String),
}

/// Maximal number of distinct interface normals for the supported dimensions.
pub fn normal_bound(dim: usize) -> usize {
    match dim {
        2 => 3,
        3 => 7,
        _ => usize::MAX,
    }
}

/// Interface normal stored as a primitive integer vector whose first nonzero
/// entry is positive, so that equality means "equal up to sign".
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Normal(Vec<i64>);

impl Normal {
    pub fn new(raw: &[i64]) -> Option<Self> {
        let g = raw.iter().fold(0i64, |acc, v| acc.gcd(v));
        if g == 0 {
            return None;
        }
        let mut v: Vec<i64> = raw.iter().map(|x| x / g).collect();
        if v.iter().find(|x| **x != 0).is_some_and(|x| *x < 0) {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        Some(Self(v))
    }

    pub fn direction(&self) -> &[i64] {
        &self.0
    }

    pub fn unit(&self) -> Vec<f64> {
        let n = self.0.iter().map(|x| (*x * *x) as f64).sum::<f64>().sqrt();
        self.0.iter().map(|x| *x as f64 / n).collect()
    }

    pub fn as_scalars<S: Scalar>(&self) -> Vec<S> {
        self.0.iter().map(|x| S::from_i64(*x)).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Simplex {
    /// Point indices, sorted ascending.
    pub vertices: Vec<usize>,
    pub volume: Rational,
    /// Inverse of the edge matrix `[P_k - P_0]_k`; maps vertex value
    /// increments to the element gradient.
    pub chart: Matrix<Rational>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Interface {
    pub elements: (usize, usize),
    pub normal: Normal,
    /// Length (N = 2) or area (N = 3) of the shared facet.
    pub measure: f64,
    /// Facet points as seen from the first element.
    pub nodes: Vec<usize>,
    /// True when the two sides are matched across opposite cube faces.
    pub periodic: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Triangulation {
    dim: usize,
    refinement: u32,
    points: Vec<Vec<i64>>,
    class_of: Vec<usize>,
    classes: Vec<Vec<usize>>,
    pub(crate) elements: Vec<Simplex>,
    pub(crate) interfaces: Vec<Interface>,
    normal_family: Vec<Normal>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NodeStar {
    pub node: usize,
    pub elements: Vec<usize>,
    pub interfaces: Vec<usize>,
}

/// Builds the Kuhn triangulation with the default element cap.
pub fn build_unit_cube_triangulation(
    dim: usize,
    refinement: u32,
) -> Result<Triangulation, GeometryError> {
    build_with_cap(dim, refinement, DEFAULT_ELEMENT_CAP)
}

pub fn build_with_cap(
    dim: usize,
    refinement: u32,
    cap: usize,
) -> Result<Triangulation, GeometryError> {
    if dim != 2 && dim != 3 {
        return Err(GeometryError::UnsupportedDimension(dim));
    }
    let factorial: usize = (1..=dim).product();
    let cells = 1usize
        .checked_shl(refinement * dim as u32)
        .filter(|c| *c > 0 && refinement < 20)
        .unwrap_or(usize::MAX);
    let elements = cells.saturating_mul(factorial);
    if elements > cap {
        return Err(GeometryError::TooLarge { elements, cap });
    }
    let grid = 1i64 << refinement;

    let points = lattice(dim, grid + 1);
    let point_index: BTreeMap<Vec<i64>, usize> =
        points.iter().enumerate().map(|(i, p)| (p.clone(), i)).collect();
    let class_keys = lattice(dim, grid);
    let class_index: BTreeMap<Vec<i64>, usize> =
        class_keys.iter().enumerate().map(|(i, p)| (p.clone(), i)).collect();
    let class_of: Vec<usize> = points
        .iter()
        .map(|p| class_index[&p.iter().map(|c| c.rem_euclid(grid)).collect::<Vec<_>>()])
        .collect();
    let mut classes = vec![Vec::new(); class_keys.len()];
    for (p, &c) in class_of.iter().enumerate() {
        classes[c].push(p);
    }

    let perms = permutations(dim);
    let mut vertex_sets: Vec<Vec<usize>> = Vec::with_capacity(elements);
    for origin in &class_keys {
        for perm in &perms {
            let mut cur = origin.clone();
            let mut verts = vec![point_index[&cur]];
            for &axis in perm {
                cur[axis] += 1;
                verts.push(point_index[&cur]);
            }
            verts.sort_unstable();
            vertex_sets.push(verts);
        }
    }
    vertex_sets.sort();

    let mut tri = Triangulation {
        dim,
        refinement,
        points,
        class_of,
        classes,
        elements: Vec::new(),
        interfaces: Vec::new(),
        normal_family: Vec::new(),
    };
    for (e, verts) in vertex_sets.into_iter().enumerate() {
        let (volume, chart) = tri.element_geometry(&verts).ok_or(GeometryError::Degenerate(e))?;
        tri.elements.push(Simplex { vertices: verts, volume, chart });
    }
    tri.interfaces = tri.match_facets()?;
    let mut family: Vec<Normal> = tri.interfaces.iter().map(|i| i.normal.clone()).collect();
    family.sort();
    family.dedup();
    tri.normal_family = family;
    Ok(tri)
}

/// All integer points of `[0, side)^dim` in lexicographic order.
fn lattice(dim: usize, side: i64) -> Vec<Vec<i64>> {
    let mut out = vec![Vec::new()];
    for _ in 0..dim {
        out = out
            .into_iter()
            .flat_map(|p| {
                (0..side).map(move |c| {
                    let mut q = p.clone();
                    q.push(c);
                    q
                })
            })
            .collect();
    }
    out
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![Vec::new()];
    }
    let mut out = Vec::new();
    for first in 0..n {
        for rest in permutations(n - 1) {
            let mut p = vec![first];
            p.extend(rest.into_iter().map(|x| if x >= first { x + 1 } else { x }));
            out.push(p);
        }
    }
    out
}

fn integer_det(rows: &[Vec<i64>]) -> i64 {
    match rows.len() {
        1 => rows[0][0],
        2 => rows[0][0] * rows[1][1] - rows[0][1] * rows[1][0],
        3 => {
            let r = rows;
            r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1])
                - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
                + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0])
        }
        _ => unreachable!("dimension checked at construction"),
    }
}

/// Integer normal of the hyperplane through `pts` (N points in N dimensions).
fn facet_normal(pts: &[Vec<i64>]) -> Option<Normal> {
    let edges: Vec<Vec<i64>> =
        pts[1..].iter().map(|p| p.iter().zip(&pts[0]).map(|(a, b)| a - b).collect()).collect();
    let raw = match pts[0].len() {
        2 => vec![edges[0][1], -edges[0][0]],
        3 => {
            let (a, b) = (&edges[0], &edges[1]);
            vec![a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
        }
        _ => return None,
    };
    Normal::new(&raw)
}

impl Triangulation {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn refinement(&self) -> u32 {
        self.refinement
    }

    /// Grid resolution `2^r`.
    pub fn grid(&self) -> i64 {
        1i64 << self.refinement
    }

    pub fn elements(&self) -> &[Simplex] {
        &self.elements
    }

    pub fn interfaces(&self) -> &[Interface] {
        &self.interfaces
    }

    pub fn normal_family(&self) -> &[Normal] {
        &self.normal_family
    }

    pub fn point_count(&self) -> usize {
        self.points.len()
    }

    /// Integer grid coordinates of a point (divide by [`Self::grid`]).
    pub fn point_grid(&self, p: usize) -> &[i64] {
        &self.points[p]
    }

    pub fn point_coords(&self, p: usize) -> Vec<Rational> {
        self.points[p].iter().map(|c| rat(*c, self.grid())).collect()
    }

    /// Number of periodic node classes.
    pub fn node_count(&self) -> usize {
        self.classes.len()
    }

    pub fn node_of_point(&self, p: usize) -> usize {
        self.class_of[p]
    }

    pub fn periodic_classes(&self) -> &[Vec<usize>] {
        &self.classes
    }

    /// Periodic nodes of an element, in vertex order (repeats possible on the
    /// coarsest mesh, where every vertex is the same class).
    pub fn element_nodes(&self, e: usize) -> Vec<usize> {
        self.elements[e].vertices.iter().map(|&p| self.class_of[p]).collect()
    }

    /// Node enumeration padded cyclically to a power of two.
    pub fn padded_node_order(&self) -> Vec<usize> {
        padded_order(self.node_count())
    }

    pub fn node_star(&self, node: usize) -> Result<NodeStar, GeometryError> {
        if node >= self.node_count() {
            return Err(GeometryError::InvalidNode { node, count: self.node_count() });
        }
        let touches = |pts: &[usize]| pts.iter().any(|&p| self.class_of[p] == node);
        let elements =
            (0..self.elements.len()).filter(|&e| touches(&self.elements[e].vertices)).collect();
        let interfaces =
            (0..self.interfaces.len()).filter(|&i| touches(&self.interfaces[i].nodes)).collect();
        Ok(NodeStar { node, elements, interfaces })
    }

    fn element_geometry(&self, verts: &[usize]) -> Option<(Rational, Matrix<Rational>)> {
        let p0 = &self.points[verts[0]];
        let edges: Vec<Vec<i64>> = verts[1..]
            .iter()
            .map(|&v| self.points[v].iter().zip(p0).map(|(a, b)| a - b).collect())
            .collect();
        let det = integer_det(&edges);
        if det == 0 {
            return None;
        }
        let factorial: i64 = (1..=self.dim as i64).product();
        let scale = self.grid().pow(self.dim as u32);
        let volume = rat(det.abs(), factorial * scale);
        // Edge matrix in real coordinates, inverted column by column.
        let g = self.grid();
        let e = Matrix::from_rows(
            &edges.iter().map(|r| r.iter().map(|c| rat(*c, g)).collect()).collect::<Vec<_>>(),
        );
        let mut inv = Matrix::zeros(self.dim, self.dim);
        for c in 0..self.dim {
            let unit: Vec<Rational> = (0..self.dim)
                .map(|k| if k == c { Rational::one() } else { Rational::zero() })
                .collect();
            let col = solve(&e, &unit)?;
            for (r, v) in col.into_iter().enumerate() {
                inv.set(r, c, v);
            }
        }
        Some((volume, inv))
    }

    /// Facet key invariant under the periodic identification: sorted vertex
    /// coordinates after shifting every axis on which the whole facet sits on
    /// the far face back to the near face.
    fn facet_key(&self, pts: &[usize]) -> Vec<Vec<i64>> {
        let g = self.grid();
        let mut coords: Vec<Vec<i64>> = pts.iter().map(|&p| self.points[p].clone()).collect();
        for axis in 0..self.dim {
            let min = coords.iter().map(|c| c[axis]).min().unwrap_or(0);
            let shift = g * min.div_euclid(g);
            coords.iter_mut().for_each(|c| c[axis] -= shift);
        }
        coords.sort();
        coords
    }

    fn element_facets(&self, e: usize) -> Vec<Vec<usize>> {
        let v = &self.elements[e].vertices;
        (0..v.len())
            .map(|skip| v.iter().enumerate().filter(|(k, _)| *k != skip).map(|(_, p)| *p).collect())
            .collect()
    }

    fn facet_table(&self) -> BTreeMap<Vec<Vec<i64>>, Vec<(usize, Vec<usize>)>> {
        let mut table: BTreeMap<Vec<Vec<i64>>, Vec<(usize, Vec<usize>)>> = BTreeMap::new();
        for e in 0..self.elements.len() {
            for facet in self.element_facets(e) {
                table.entry(self.facet_key(&facet)).or_default().push((e, facet));
            }
        }
        table
    }

    fn facet_measure(&self, pts: &[usize]) -> f64 {
        let g = self.grid() as f64;
        let c: Vec<Vec<f64>> =
            pts.iter().map(|&p| self.points[p].iter().map(|x| *x as f64 / g).collect()).collect();
        let d: Vec<Vec<f64>> =
            c[1..].iter().map(|p| p.iter().zip(&c[0]).map(|(a, b)| a - b).collect()).collect();
        match self.dim {
            2 => (d[0][0] * d[0][0] + d[0][1] * d[0][1]).sqrt(),
            _ => {
                let (a, b) = (&d[0], &d[1]);
                let x = a[1] * b[2] - a[2] * b[1];
                let y = a[2] * b[0] - a[0] * b[2];
                let z = a[0] * b[1] - a[1] * b[0];
                0.5 * (x * x + y * y + z * z).sqrt()
            }
        }
    }

    fn match_facets(&self) -> Result<Vec<Interface>, GeometryError> {
        let mut out = Vec::new();
        for (_, sides) in self.facet_table() {
            if sides.len() != 2 {
                return Err(GeometryError::Malformed(format!(
                    "facet shared by {} elements",
                    sides.len()
                )));
            }
            let (mut a, mut b) = (sides[0].clone(), sides[1].clone());
            if a.0 > b.0 {
                std::mem::swap(&mut a, &mut b);
            }
            let pts: Vec<Vec<i64>> = a.1.iter().map(|&p| self.points[p].clone()).collect();
            let normal = facet_normal(&pts).ok_or(GeometryError::Degenerate(a.0))?;
            let periodic = {
                let mut pa: Vec<_> = a.1.iter().map(|&p| &self.points[p]).collect();
                let mut pb: Vec<_> = b.1.iter().map(|&p| &self.points[p]).collect();
                pa.sort();
                pb.sort();
                pa != pb
            };
            out.push(Interface {
                elements: (a.0, b.0),
                normal,
                measure: self.facet_measure(&a.1),
                nodes: a.1,
                periodic,
            });
        }
        out.sort_by(|x, y| (x.elements, &x.nodes).cmp(&(y.elements, &y.nodes)));
        Ok(out)
    }

    /// JSON payload: `{N, refinement, nodes, periodic_classes, elements, interfaces}`.
    pub fn to_json(&self) -> serde_json::Value {
        use serde_json::json;
        json!({
            "N": self.dim,
            "refinement": self.refinement,
            "nodes": (0..self.points.len())
                .map(|p| self.point_coords(p).iter().map(Scalar::encode).collect::<Vec<_>>())
                .collect::<Vec<_>>(),
            "periodic_classes": self.classes,
            "elements": self.elements.iter().map(|e| json!({
                "verts": e.vertices,
                "volume": e.volume.encode(),
            })).collect::<Vec<_>>(),
            "interfaces": self.interfaces.iter().map(|i| json!({
                "i": i.elements.0,
                "j": i.elements.1,
                "normal": i.normal.direction().iter().map(|c| rat(*c, 1).encode()).collect::<Vec<_>>(),
                "nodes": i.nodes,
                "periodic": i.periodic,
            })).collect::<Vec<_>>(),
        })
    }

    /// Reads a payload written by [`Self::to_json`]. Point coordinates, classes,
    /// element lists and volumes are taken from the payload as stored; charts
    /// and the normal family are recomputed.
    pub fn from_json(v: &serde_json::Value) -> Result<Self, GeometryError> {
        let bad = |m: &str| GeometryError::Malformed(m.to_string());
        let dim = v["N"].as_u64().ok_or_else(|| bad("N"))? as usize;
        let refinement = v["refinement"].as_u64().ok_or_else(|| bad("refinement"))? as u32;
        if dim != 2 && dim != 3 {
            return Err(GeometryError::UnsupportedDimension(dim));
        }
        let grid = 1i64 << refinement;
        let mut points = Vec::new();
        for p in v["nodes"].as_array().ok_or_else(|| bad("nodes"))? {
            let coords = p.as_array().ok_or_else(|| bad("node"))?;
            let mut out = Vec::new();
            for c in coords {
                let r = Rational::decode(c.as_str().ok_or_else(|| bad("coord"))?)
                    .ok_or_else(|| bad("coord"))?;
                let scaled = r * rat(grid, 1);
                if !scaled.is_integer() {
                    return Err(bad("coordinate off the grid"));
                }
                out.push(num_traits::ToPrimitive::to_i64(&scaled.to_integer()).ok_or_else(|| bad("coord"))?);
            }
            points.push(out);
        }
        let classes: Vec<Vec<usize>> = serde_json::from_value(v["periodic_classes"].clone())
            .map_err(|e| bad(&e.to_string()))?;
        let mut class_of = vec![usize::MAX; points.len()];
        for (c, members) in classes.iter().enumerate() {
            for &p in members {
                *class_of.get_mut(p).ok_or_else(|| bad("class member"))? = c;
            }
        }
        if class_of.contains(&usize::MAX) {
            return Err(bad("point without class"));
        }
        let mut tri = Triangulation {
            dim,
            refinement,
            points,
            class_of,
            classes,
            elements: Vec::new(),
            interfaces: Vec::new(),
            normal_family: Vec::new(),
        };
        for (e, el) in v["elements"].as_array().ok_or_else(|| bad("elements"))?.iter().enumerate() {
            let verts: Vec<usize> =
                serde_json::from_value(el["verts"].clone()).map_err(|e| bad(&e.to_string()))?;
            if verts.len() != dim + 1 || verts.iter().any(|&p| p >= tri.points.len()) {
                return Err(bad("element vertices"));
            }
            let volume = Rational::decode(el["volume"].as_str().ok_or_else(|| bad("volume"))?)
                .ok_or_else(|| bad("volume"))?;
            let (_, chart) = tri.element_geometry(&verts).ok_or(GeometryError::Degenerate(e))?;
            tri.elements.push(Simplex { vertices: verts, volume, chart });
        }
        for i in v["interfaces"].as_array().ok_or_else(|| bad("interfaces"))? {
            let a = i["i"].as_u64().ok_or_else(|| bad("interface i"))? as usize;
            let b = i["j"].as_u64().ok_or_else(|| bad("interface j"))? as usize;
            let raw: Vec<i64> = i["normal"]
                .as_array()
                .ok_or_else(|| bad("normal"))?
                .iter()
                .map(|c| {
                    c.as_str()
                        .and_then(Rational::decode)
                        .filter(|r| r.is_integer())
                        .and_then(|r| num_traits::ToPrimitive::to_i64(&r.to_integer()))
                })
                .collect::<Option<_>>()
                .ok_or_else(|| bad("normal"))?;
            let nodes: Vec<usize> =
                serde_json::from_value(i["nodes"].clone()).map_err(|e| bad(&e.to_string()))?;
            if a >= tri.elements.len() || b >= tri.elements.len() || nodes.len() != dim {
                return Err(bad("interface references"));
            }
            tri.interfaces.push(Interface {
                elements: (a, b),
                normal: Normal::new(&raw).ok_or_else(|| bad("zero normal"))?,
                measure: tri.facet_measure(&nodes),
                nodes,
                periodic: i["periodic"].as_bool().unwrap_or(false),
            });
        }
        let mut family: Vec<Normal> = tri.interfaces.iter().map(|i| i.normal.clone()).collect();
        family.sort();
        family.dedup();
        tri.normal_family = family;
        Ok(tri)
    }
}

/// `0..count` repeated cyclically up to the next power of two.
pub fn padded_order(count: usize) -> Vec<usize> {
    let target = count.next_power_of_two();
    (0..target).map(|k| k % count.max(1)).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub enum Violation {
    VolumeSum { sum: Rational },
    NonPositiveVolume { element: usize },
    VolumeMismatch { element: usize },
    UnmatchedFacet { element: usize },
    OverSharedFacet { element: usize, count: usize },
    InterfaceNotShared { interface: usize },
    NormalNotOrthogonal { interface: usize },
    NormalOutsideFamily { interface: usize },
    FamilyTooLarge { size: usize, bound: usize },
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Violation::VolumeSum { sum } => write!(f, "volumes sum to {sum}, not 1"),
            Violation::NonPositiveVolume { element } => {
                write!(f, "element {element} has non-positive volume")
            }
            Violation::VolumeMismatch { element } => {
                write!(f, "element {element} volume disagrees with its vertices")
            }
            Violation::UnmatchedFacet { element } => {
                write!(f, "element {element} has a facet with no periodic partner")
            }
            Violation::OverSharedFacet { element, count } => {
                write!(f, "element {element} has a facet shared by {count} elements")
            }
            Violation::InterfaceNotShared { interface } => {
                write!(f, "interface {interface} does not join its two elements")
            }
            Violation::NormalNotOrthogonal { interface } => {
                write!(f, "interface {interface} normal is not orthogonal to its facet")
            }
            Violation::NormalOutsideFamily { interface } => {
                write!(f, "interface {interface} normal outside the normal family")
            }
            Violation::FamilyTooLarge { size, bound } => {
                write!(f, "normal family has {size} directions, bound is {bound}")
            }
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Checks every structural invariant; never fails, the report carries problems.
pub fn validate(tri: &Triangulation) -> ValidationReport {
    let mut violations = Vec::new();
    let sum = tri.elements.iter().fold(Rational::zero(), |acc, e| acc + e.volume.clone());
    if !sum.is_one() {
        violations.push(Violation::VolumeSum { sum });
    }
    for (i, e) in tri.elements.iter().enumerate() {
        if !e.volume.is_positive() {
            violations.push(Violation::NonPositiveVolume { element: i });
        }
        match tri.element_geometry(&e.vertices) {
            Some((vol, _)) if vol == e.volume => {}
            _ => violations.push(Violation::VolumeMismatch { element: i }),
        }
    }
    let table = tri.facet_table();
    for sides in table.values() {
        match sides.len() {
            2 => {}
            1 => violations.push(Violation::UnmatchedFacet { element: sides[0].0 }),
            n => violations.push(Violation::OverSharedFacet { element: sides[0].0, count: n }),
        }
    }
    let bound = normal_bound(tri.dim);
    if tri.normal_family.len() > bound {
        violations.push(Violation::FamilyTooLarge { size: tri.normal_family.len(), bound });
    }
    for (k, iface) in tri.interfaces.iter().enumerate() {
        let key = tri.facet_key(&iface.nodes);
        let shared = table.get(&key).is_some_and(|sides| {
            let mut owners: Vec<usize> = sides.iter().map(|s| s.0).collect();
            owners.sort_unstable();
            owners == vec![iface.elements.0, iface.elements.1]
        });
        if !shared {
            violations.push(Violation::InterfaceNotShared { interface: k });
        }
        let p0 = &tri.points[iface.nodes[0]];
        let orthogonal = iface.nodes[1..].iter().all(|&p| {
            tri.points[p]
                .iter()
                .zip(p0)
                .zip(iface.normal.direction())
                .map(|((a, b), n)| (a - b) * n)
                .sum::<i64>()
                == 0
        });
        if !orthogonal {
            violations.push(Violation::NormalNotOrthogonal { interface: k });
        }
        if !tri.normal_family.contains(&iface.normal) {
            violations.push(Violation::NormalOutsideFamily { interface: k });
        }
    }
    ValidationReport { violations }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn coarsest_square() {
        let tri = build_unit_cube_triangulation(2, 0).unwrap();
        assert_eq!(tri.elements().len(), 2);
        assert!(tri.elements().iter().all(|e| e.volume == rat(1, 2)));
        let fam: Vec<Vec<i64>> =
            tri.normal_family().iter().map(|n| n.direction().to_vec()).collect();
        assert_eq!(fam, vec![vec![0, 1], vec![1, -1], vec![1, 0]]);
        assert_eq!(tri.node_count(), 1);
        assert_eq!(tri.interfaces().len(), 3);
        assert_eq!(tri.interfaces().iter().filter(|i| i.periodic).count(), 2);
    }

    #[test]
    fn refined_square_counts() {
        let tri = build_unit_cube_triangulation(2, 1).unwrap();
        assert_eq!(tri.elements().len(), 8);
        assert!(tri.elements().iter().all(|e| e.volume == rat(1, 8)));
        assert_eq!(tri.node_count(), 4);
        assert_eq!(tri.interfaces().len(), 12);
        assert_eq!(tri.normal_family().len(), 3);
    }

    #[test]
    fn kuhn_cube_normals() {
        let tri = build_unit_cube_triangulation(3, 0).unwrap();
        assert_eq!(tri.elements().len(), 6);
        assert!(tri.elements().iter().all(|e| e.volume == rat(1, 6)));
        // Realized family: three coordinate normals and three x_i = x_j planes.
        let fam: Vec<Vec<i64>> =
            tri.normal_family().iter().map(|n| n.direction().to_vec()).collect();
        assert_eq!(
            fam,
            vec![
                vec![0, 0, 1],
                vec![0, 1, -1],
                vec![0, 1, 0],
                vec![1, -1, 0],
                vec![1, 0, -1],
                vec![1, 0, 0]
            ]
        );
        assert!(validate(&tri).is_valid());
    }

    #[test]
    fn errors_for_bad_requests() {
        assert_eq!(build_unit_cube_triangulation(4, 0), Err(GeometryError::UnsupportedDimension(4)));
        assert!(matches!(build_with_cap(2, 3, 100), Err(GeometryError::TooLarge { .. })));
        let tri = build_unit_cube_triangulation(2, 0).unwrap();
        assert!(matches!(tri.node_star(1), Err(GeometryError::InvalidNode { .. })));
    }

    #[test]
    fn corner_star_of_coarsest_mesh() {
        let tri = build_unit_cube_triangulation(2, 0).unwrap();
        let star = tri.node_star(0).unwrap();
        assert_eq!(star.elements, vec![0, 1]);
        assert_eq!(star.interfaces, vec![0, 1, 2]);
    }

    #[test]
    fn interior_star_has_six_triangles() {
        let tri = build_unit_cube_triangulation(2, 1).unwrap();
        // Class of the grid point (1, 1), i.e. (1/2, 1/2).
        let p = (0..tri.point_count()).find(|&p| tri.point_grid(p) == [1, 1]).unwrap();
        let star = tri.node_star(tri.node_of_point(p)).unwrap();
        assert_eq!(star.elements.len(), 6);
        assert_eq!(star.interfaces.len(), 6);
    }

    #[test]
    fn validation_flags_perturbations() {
        let mut tri = build_unit_cube_triangulation(2, 1).unwrap();
        assert!(validate(&tri).is_valid());
        tri.elements[3].volume += rat(1, 1000);
        let report = validate(&tri);
        assert!(report.violations.iter().any(|v| matches!(v, Violation::VolumeSum { .. })));

        let mut tri = build_unit_cube_triangulation(2, 1).unwrap();
        let diag = tri.interfaces.iter().position(|i| i.normal.direction() == [1, -1]).unwrap();
        tri.interfaces[diag].normal = Normal::new(&[1, 1]).unwrap();
        let report = validate(&tri);
        assert!(report
            .violations
            .contains(&Violation::NormalOutsideFamily { interface: diag }));
    }

    #[test]
    fn padding_to_power_of_two() {
        assert_eq!(padded_order(4), vec![0, 1, 2, 3]);
        assert_eq!(padded_order(3), vec![0, 1, 2, 0]);
        assert_eq!(padded_order(5).len(), 8);
    }

    #[test]
    fn json_round_trip() {
        let tri = build_unit_cube_triangulation(3, 0).unwrap();
        let back = Triangulation::from_json(&tri.to_json()).unwrap();
        assert_eq!(back, tri);
    }
}
