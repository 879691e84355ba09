//! Binary split/merge trees over a cone of admissible directions.
//!
//! Node `(k, i)` (0-based, `i < 2^k`) has children `(k+1, 2i)` and
//! `(k+1, 2i+1)`. Splitting a node with point `u`, weight `s`, direction `U`
//! and relative weight `t` yields
//!
//! ```text
//! first  = u + (1 - t) U   with weight s t
//! second = u - t U         with weight s (1 - t)
//! ```
//!
//! so `first - second = U` and `t` is the weight fraction of the first child.

use num_traits::{One, Zero};
use serde_json::{json, Value};
use thiserror::Error;

use crate::linalg::Matrix;
use crate::lp::{feasible_point, LinearSystem};
use crate::pwa::merge;
use crate::scalar::{parallel, Rational, Scalar};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HnError {
    #[error("direction at node ({level}, {index}) is outside the {cone} cone")]
    ConeViolation { level: usize, index: usize, cone: &'static str },
    #[error("relative weight must lie in [0, 1]")]
    WeightOutOfRange,
    #[error("node ({level}, {index}) is not an open leaf")]
    NotALeaf { level: usize, index: usize },
    #[error("node ({level}, {index}) has zero weight")]
    ZeroWeight { level: usize, index: usize },
    #[error("leaf count {0} is not a power of two")]
    LeafCount(usize),
    #[error("leaf weights are negative or do not sum to one")]
    Normalization,
    #[error("shape mismatch between matrices")]
    Shape,
    #[error("search limits exceeded: {0}")]
    Limits(String),
    #[error("malformed certificate payload: {0}")]
    Malformed(String),
}

/// Admissible split directions.
pub trait Cone<S: Scalar>: Sync {
    fn name(&self) -> &'static str;
    fn contains(&self, m: &Matrix<S>, tol: f64) -> bool;
}

/// Matrices of rank at most one.
#[derive(Clone, Copy, Debug, Default)]
pub struct RankOne;

impl<S: Scalar> Cone<S> for RankOne {
    fn name(&self) -> &'static str {
        "rank-one"
    }

    fn contains(&self, m: &Matrix<S>, tol: f64) -> bool {
        // Rank <= 1 iff the rows are pairwise parallel.
        (0..m.rows()).all(|a| ((a + 1)..m.rows()).all(|b| parallel(m.row(a), m.row(b), tol)))
    }
}

/// Every direction admissible (plain convex combinations).
#[derive(Clone, Copy, Debug, Default)]
pub struct FullSpace;

impl<S: Scalar> Cone<S> for FullSpace {
    fn name(&self) -> &'static str {
        "full"
    }

    fn contains(&self, _m: &Matrix<S>, _tol: f64) -> bool {
        true
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Node<S> {
    pub weight: S,
    pub point: Matrix<S>,
}

/// Split data of an internal node.
#[derive(Clone, Debug, PartialEq)]
pub struct Split<S> {
    pub t: S,
    pub direction: Matrix<S>,
}

/// Full binary tree of depth `m`: `levels[k]` has `2^k` nodes and
/// `splits[k]` (for `k < m`) the split data of each of them.
#[derive(Clone, Debug, PartialEq)]
pub struct HnTree<S> {
    pub levels: Vec<Vec<Node<S>>>,
    pub splits: Vec<Vec<Split<S>>>,
}

impl<S: Scalar> HnTree<S> {
    pub fn depth(&self) -> usize {
        self.levels.len() - 1
    }

    pub fn root(&self) -> &Node<S> {
        &self.levels[0][0]
    }

    pub fn leaves(&self) -> &[Node<S>] {
        &self.levels[self.depth()]
    }

    /// Leaf measure with equal matrices merged and zero weights dropped.
    pub fn leaf_measure(&self, tol: f64) -> Vec<(Matrix<S>, S)> {
        merge(
            self.leaves()
                .iter()
                .filter(|n| !n.weight.is_negligible(0.0))
                .map(|n| (n.point.clone(), n.weight.clone())),
            tol,
        )
    }

    /// Normalized leaf measure below node `(level, index)`, with weights
    /// `s_j / s_i` (leaves kept unmerged, zero weights included).
    pub fn sub_measure(&self, level: usize, index: usize) -> Result<Vec<Node<S>>, HnError> {
        let node = self
            .levels
            .get(level)
            .and_then(|l| l.get(index))
            .ok_or(HnError::NotALeaf { level, index })?;
        if node.weight.is_negligible(0.0) {
            return Err(HnError::ZeroWeight { level, index });
        }
        let span = 1usize << (self.depth() - level);
        Ok(self.leaves()[index * span..(index + 1) * span]
            .iter()
            .map(|l| Node { weight: l.weight.clone() / node.weight.clone(), point: l.point.clone() })
            .collect())
    }

    pub fn to_json(&self, target_measure_ref: &str) -> Value {
        let mat = |m: &Matrix<S>| {
            m.row_vecs()
                .iter()
                .map(|r| r.iter().map(Scalar::encode).collect::<Vec<_>>())
                .collect::<Vec<_>>()
        };
        json!({
            "depth": self.depth(),
            "levels": self.levels.iter().map(|l| l.iter().map(|n| json!({
                "w": n.weight.encode(),
                "matrix": mat(&n.point),
            })).collect::<Vec<_>>()).collect::<Vec<_>>(),
            "directions": self.splits.iter().map(|l| l.iter().map(|s| json!({
                "t": s.t.encode(),
                "direction": mat(&s.direction),
            })).collect::<Vec<_>>()).collect::<Vec<_>>(),
            "target_measure_ref": target_measure_ref,
        })
    }

    pub fn from_json(v: &Value) -> Result<Self, HnError> {
        let bad = |m: &str| HnError::Malformed(m.to_string());
        let num = |x: &Value| x.as_str().and_then(S::decode).ok_or_else(|| bad("number"));
        let mat = |x: &Value| -> Result<Matrix<S>, HnError> {
            let rows = x.as_array().ok_or_else(|| bad("matrix"))?;
            let rows: Vec<Vec<S>> = rows
                .iter()
                .map(|r| r.as_array().ok_or_else(|| bad("row"))?.iter().map(num).collect())
                .collect::<Result<_, _>>()?;
            let cols = rows.first().map_or(0, Vec::len);
            if rows.iter().any(|r| r.len() != cols) {
                return Err(bad("ragged matrix"));
            }
            Ok(Matrix::from_rows(&rows))
        };
        let mut levels = Vec::new();
        for l in v["levels"].as_array().ok_or_else(|| bad("levels"))? {
            let nodes = l.as_array().ok_or_else(|| bad("level"))?;
            levels.push(
                nodes
                    .iter()
                    .map(|n| Ok(Node { weight: num(&n["w"])?, point: mat(&n["matrix"])? }))
                    .collect::<Result<Vec<_>, HnError>>()?,
            );
        }
        let mut splits = Vec::new();
        for l in v["directions"].as_array().ok_or_else(|| bad("directions"))? {
            let nodes = l.as_array().ok_or_else(|| bad("level"))?;
            splits.push(
                nodes
                    .iter()
                    .map(|n| Ok(Split { t: num(&n["t"])?, direction: mat(&n["direction"])? }))
                    .collect::<Result<Vec<_>, HnError>>()?,
            );
        }
        let shape_ok = !levels.is_empty()
            && splits.len() + 1 == levels.len()
            && levels.iter().enumerate().all(|(k, l)| l.len() == 1 << k)
            && splits.iter().enumerate().all(|(k, l)| l.len() == 1 << k);
        if !shape_ok {
            return Err(bad("tree shape"));
        }
        Ok(Self { levels, splits })
    }
}

/// Top-down construction. Nodes split explicitly keep their data; on
/// [`HnBuilder::finish`] every open node above the deepest level is padded
/// with zero-direction splits at `t = 1/2`.
#[derive(Clone, Debug)]
pub struct HnBuilder<S> {
    /// `nodes[k][i]`, present when created.
    nodes: Vec<Vec<Option<Node<S>>>>,
    splits: Vec<Vec<Option<Split<S>>>>,
}

impl<S: Scalar> HnBuilder<S> {
    pub fn new(base: Matrix<S>) -> Self {
        Self { nodes: vec![vec![Some(Node { weight: S::one(), point: base })]], splits: vec![] }
    }

    pub fn node(&self, level: usize, index: usize) -> Option<&Node<S>> {
        self.nodes.get(level)?.get(index)?.as_ref()
    }

    pub fn split(
        &mut self,
        level: usize,
        index: usize,
        direction: Matrix<S>,
        t: S,
        cone: &dyn Cone<S>,
        tol: f64,
    ) -> Result<(), HnError> {
        let node = self.node(level, index).cloned().ok_or(HnError::NotALeaf { level, index })?;
        if self.splits.get(level).and_then(|l| l[index].as_ref()).is_some() {
            return Err(HnError::NotALeaf { level, index });
        }
        if (direction.rows(), direction.cols()) != (node.point.rows(), node.point.cols()) {
            return Err(HnError::Shape);
        }
        if t < S::zero() || t > S::one() {
            return Err(HnError::WeightOutOfRange);
        }
        if !direction.is_zero(0.0) && !cone.contains(&direction, tol) {
            return Err(HnError::ConeViolation { level, index, cone: cone.name() });
        }
        while self.nodes.len() <= level + 1 {
            let k = self.nodes.len();
            self.nodes.push(vec![None; 1 << k]);
        }
        while self.splits.len() <= level {
            let k = self.splits.len();
            self.splits.push(vec![None; 1 << k]);
        }
        let one_minus = S::one() - t.clone();
        self.nodes[level + 1][2 * index] = Some(Node {
            weight: node.weight.clone() * t.clone(),
            point: node.point.add(&direction.scale(&one_minus)),
        });
        self.nodes[level + 1][2 * index + 1] = Some(Node {
            weight: node.weight.clone() * one_minus,
            point: node.point.sub(&direction.scale(&t)),
        });
        self.splits[level][index] = Some(Split { t, direction });
        Ok(())
    }

    /// Pads open leaves down to `min_depth` (or the deepest split level).
    pub fn finish(mut self, min_depth: usize) -> HnTree<S> {
        let depth = usize::max(min_depth, self.nodes.len() - 1);
        while self.nodes.len() <= depth {
            let k = self.nodes.len();
            self.nodes.push(vec![None; 1 << k]);
        }
        while self.splits.len() < depth {
            let k = self.splits.len();
            self.splits.push(vec![None; 1 << k]);
        }
        for k in 0..depth {
            for i in 0..(1 << k) {
                if self.splits[k][i].is_some() {
                    continue;
                }
                let node = self.nodes[k][i].clone().expect("parent exists");
                let zero = node.point.scale(&S::zero());
                let half = Node { weight: node.weight.clone() * S::half(), point: node.point };
                self.nodes[k + 1][2 * i] = Some(half.clone());
                self.nodes[k + 1][2 * i + 1] = Some(half);
                self.splits[k][i] = Some(Split { t: S::half(), direction: zero });
            }
        }
        HnTree {
            levels: self
                .nodes
                .into_iter()
                .map(|l| l.into_iter().map(|n| n.expect("complete level")).collect())
                .collect(),
            splits: self
                .splits
                .into_iter()
                .map(|l| l.into_iter().map(|s| s.expect("complete level")).collect())
                .collect(),
        }
    }
}

/// Reconstructs the whole tree from its `2^m` leaves. Parents are weighted
/// averages; a zero-weight parent takes the midpoint of its children and the
/// relative weight `1/2`.
pub fn evaluate_bottom_up<S: Scalar>(leaves: Vec<Node<S>>, tol: f64) -> Result<HnTree<S>, HnError> {
    let count = leaves.len();
    if count == 0 || !count.is_power_of_two() {
        return Err(HnError::LeafCount(count));
    }
    let shape = (leaves[0].point.rows(), leaves[0].point.cols());
    if leaves.iter().any(|l| (l.point.rows(), l.point.cols()) != shape) {
        return Err(HnError::Shape);
    }
    let total = leaves.iter().fold(S::zero(), |acc, l| acc + l.weight.clone());
    let negative = leaves.iter().any(|l| !S::le_tol(&S::zero(), &l.weight, tol));
    if negative || !S::approx_eq(&total, &S::one(), tol) {
        return Err(HnError::Normalization);
    }
    let mut levels = vec![leaves];
    let mut splits = Vec::new();
    while levels[0].len() > 1 {
        let below = &levels[0];
        let mut nodes = Vec::with_capacity(below.len() / 2);
        let mut level_splits = Vec::with_capacity(below.len() / 2);
        for pair in below.chunks(2) {
            let (a, b) = (&pair[0], &pair[1]);
            let w = a.weight.clone() + b.weight.clone();
            let direction = a.point.sub(&b.point);
            let (point, t) = if w.is_negligible(0.0) {
                (a.point.add(&b.point).scale(&S::half()), S::half())
            } else {
                let p = a.point.scale(&a.weight).add(&b.point.scale(&b.weight)).scale(&(S::one() / w.clone()));
                (p, a.weight.clone() / w.clone())
            };
            nodes.push(Node { weight: w, point });
            level_splits.push(Split { t, direction });
        }
        levels.insert(0, nodes);
        splits.insert(0, level_splits);
    }
    Ok(HnTree { levels, splits })
}

#[derive(Clone, Debug, PartialEq)]
pub enum CertViolation {
    RootWeight,
    NegativeWeight { level: usize, index: usize },
    WeightSum { level: usize, index: usize },
    RelativeWeight { level: usize, index: usize },
    Merge { level: usize, index: usize },
    DirectionMismatch { level: usize, index: usize },
    Cone { level: usize, index: usize },
    OutsideHull { level: usize, index: usize },
    LeafMeasure,
}

impl std::fmt::Display for CertViolation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        use CertViolation::*;
        match self {
            RootWeight => write!(f, "root weight is not 1"),
            NegativeWeight { level, index } => write!(f, "negative weight at ({level}, {index})"),
            WeightSum { level, index } => {
                write!(f, "children weights do not add up at ({level}, {index})")
            }
            RelativeWeight { level, index } => {
                write!(f, "relative weight inconsistent at ({level}, {index})")
            }
            Merge { level, index } => write!(f, "point is not the children's average at ({level}, {index})"),
            DirectionMismatch { level, index } => {
                write!(f, "sibling difference not parallel to direction at ({level}, {index})")
            }
            Cone { level, index } => write!(f, "sibling difference outside cone at ({level}, {index})"),
            OutsideHull { level, index } => {
                write!(f, "point outside the leaves' convex hull at ({level}, {index})")
            }
            LeafMeasure => write!(f, "leaf measure differs from target"),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CertificateReport {
    pub violations: Vec<CertViolation>,
}

impl CertificateReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Tree plus the measure it claims to decompose.
#[derive(Clone, Debug, PartialEq)]
pub struct HnCertificate<S> {
    pub tree: HnTree<S>,
    pub target: Vec<(Matrix<S>, S)>,
}

/// Direct hull check is skipped above this many leaves; the merge checks
/// already imply it.
const HULL_CHECK_LEAVES: usize = 32;

pub fn validate_certificate<S: Scalar>(
    cert: &HnCertificate<S>,
    cone: &dyn Cone<S>,
    tol: f64,
) -> CertificateReport {
    let tree = &cert.tree;
    let mut v = Vec::new();
    if !S::approx_eq(&tree.root().weight, &S::one(), tol) {
        v.push(CertViolation::RootWeight);
    }
    for (k, level) in tree.levels.iter().enumerate() {
        for (i, n) in level.iter().enumerate() {
            if !S::le_tol(&S::zero(), &n.weight, tol) {
                v.push(CertViolation::NegativeWeight { level: k, index: i });
            }
        }
    }
    let scale = tree
        .leaves()
        .iter()
        .fold(1.0f64, |acc, l| acc.max(l.point.max_abs().to_f64()));
    let mtol = tol * scale;
    for k in 0..tree.depth() {
        for i in 0..(1 << k) {
            let (p, a, b) = (&tree.levels[k][i], &tree.levels[k + 1][2 * i], &tree.levels[k + 1][2 * i + 1]);
            let split = &tree.splits[k][i];
            let id = (k, i);
            let w = a.weight.clone() + b.weight.clone();
            if !S::approx_eq(&w, &p.weight, tol) {
                v.push(CertViolation::WeightSum { level: id.0, index: id.1 });
            }
            let positive = !p.weight.is_negligible(tol);
            if positive {
                let expected_t = a.weight.clone() / p.weight.clone();
                if !S::approx_eq(&expected_t, &split.t, tol) {
                    v.push(CertViolation::RelativeWeight { level: k, index: i });
                }
                let avg = a.point.scale(&a.weight).add(&b.point.scale(&b.weight));
                if !avg.approx_eq(&p.point.scale(&p.weight), mtol) {
                    v.push(CertViolation::Merge { level: k, index: i });
                }
            } else {
                let mid = a.point.add(&b.point).scale(&S::half());
                if !mid.approx_eq(&p.point, mtol) {
                    v.push(CertViolation::Merge { level: k, index: i });
                }
            }
            let diff = a.point.sub(&b.point);
            if !parallel(diff.data(), split.direction.data(), tol) {
                v.push(CertViolation::DirectionMismatch { level: k, index: i });
            }
            if !diff.is_zero(mtol) && !cone.contains(&diff, tol) {
                v.push(CertViolation::Cone { level: k, index: i });
            }
        }
    }
    if tree.leaves().len() <= HULL_CHECK_LEAVES {
        for k in 0..tree.depth() {
            for i in 0..(1 << k) {
                if !in_hull(&tree.levels[k][i].point, tree.leaves()) {
                    v.push(CertViolation::OutsideHull { level: k, index: i });
                }
            }
        }
    }
    if !same_measure(&tree.leaf_measure(mtol), &cert.target, tol, mtol) {
        v.push(CertViolation::LeafMeasure);
    }
    CertificateReport { violations: v }
}

/// Equality of merged measures up to permutation of atoms.
pub fn same_measure<S: Scalar>(
    a: &[(Matrix<S>, S)],
    b: &[(Matrix<S>, S)],
    weight_tol: f64,
    point_tol: f64,
) -> bool {
    let a: Vec<_> = a.iter().filter(|(_, w)| !w.is_negligible(weight_tol)).collect();
    let b: Vec<_> = b.iter().filter(|(_, w)| !w.is_negligible(weight_tol)).collect();
    a.len() == b.len()
        && a.iter().all(|(p, w)| {
            let mass = b
                .iter()
                .filter(|(q, _)| q.approx_eq(p, point_tol))
                .fold(S::zero(), |acc, (_, x)| acc + x.clone());
            S::approx_eq(&mass, w, weight_tol)
        })
}

fn in_hull<S: Scalar>(p: &Matrix<S>, leaves: &[Node<S>]) -> bool {
    let cols = leaves.len();
    let mut rows: Vec<Vec<S>> = (0..p.data().len())
        .map(|e| leaves.iter().map(|l| l.point.data()[e].clone()).collect())
        .collect();
    let mut rhs: Vec<S> = p.data().to_vec();
    rows.push(vec![S::one(); cols]);
    rhs.push(S::one());
    let sys = LinearSystem::new(Matrix::from_rows(&rows), rhs);
    feasible_point(&sys).is_ok()
}

/// Directions allowed in the exhaustive search.
#[derive(Clone, Debug, PartialEq)]
pub enum DirectionSet {
    /// Any rank-one matrix.
    AnyRankOne,
    /// Rank-one matrices `a (x) n` with `n` parallel to one of the given vectors.
    Normals(Vec<Vec<Rational>>),
}

impl DirectionSet {
    fn admits(&self, m: &Matrix<Rational>) -> bool {
        if !RankOne.contains(m, 0.0) {
            return false;
        }
        match self {
            DirectionSet::AnyRankOne => true,
            DirectionSet::Normals(ns) => {
                ns.iter().any(|n| (0..m.rows()).all(|r| parallel(m.row(r), n, 0.0)))
            }
        }
    }
}

pub const ORACLE_MAX_SUPPORT: usize = 8;
pub const ORACLE_MAX_DEPTH: usize = 4;

/// Exhaustive search for a laminate that splits the support into two groups
/// at every node (atom masses are never divided between branches). Finds the
/// shallowest such tree; sound but not complete for general laminates.
pub fn brute_force_laminate_search(
    measure: &[(Matrix<Rational>, Rational)],
    max_depth: usize,
    directions: &DirectionSet,
) -> Result<Option<HnCertificate<Rational>>, HnError> {
    let atoms: Vec<(Matrix<Rational>, Rational)> =
        merge(measure.iter().filter(|(_, w)| !w.is_zero()).cloned(), 0.0);
    if atoms.len() > ORACLE_MAX_SUPPORT {
        return Err(HnError::Limits(format!(
            "support {} above {ORACLE_MAX_SUPPORT}",
            atoms.len()
        )));
    }
    if max_depth > ORACLE_MAX_DEPTH {
        return Err(HnError::Limits(format!("depth {max_depth} above {ORACLE_MAX_DEPTH}")));
    }
    let total = atoms.iter().fold(Rational::zero(), |acc, (_, w)| acc + w.clone());
    if atoms.is_empty() || !total.is_one() {
        return Err(HnError::Normalization);
    }
    let full = (1usize << atoms.len()) - 1;
    let weight = |mask: usize| {
        (0..atoms.len())
            .filter(|j| mask >> j & 1 == 1)
            .fold(Rational::zero(), |acc, j| acc + atoms[j].1.clone())
    };
    let bary = |mask: usize| {
        let w = weight(mask);
        let mut acc = atoms[0].0.scale(&Rational::zero());
        for (j, (p, wj)) in atoms.iter().enumerate() {
            if mask >> j & 1 == 1 {
                acc = acc.add(&p.scale(wj));
            }
        }
        acc.scale(&(Rational::one() / w))
    };
    // best[d][mask]: a splitting (first group) realizing depth <= d.
    let mut reachable = vec![vec![None::<usize>; full + 1]; max_depth + 1];
    for d in 0..=max_depth {
        for mask in 1..=full {
            if mask.count_ones() == 1 {
                reachable[d][mask] = Some(0);
                continue;
            }
            if d == 0 {
                continue;
            }
            if reachable[d - 1][mask].is_some() {
                reachable[d][mask] = reachable[d - 1][mask];
                continue;
            }
            let low = mask & mask.wrapping_neg();
            let mut sub = (mask - 1) & mask;
            while sub > 0 {
                if sub & low != 0 {
                    let rest = mask ^ sub;
                    if reachable[d - 1][sub].is_some()
                        && reachable[d - 1][rest].is_some()
                        && directions.admits(&bary(sub).sub(&bary(rest)))
                    {
                        reachable[d][mask] = Some(sub);
                        break;
                    }
                }
                sub = (sub - 1) & mask;
            }
        }
        if reachable[d][full].is_some() {
            let mut leaves = Vec::with_capacity(1 << d);
            emit_leaves(full, d, &reachable, &weight, &bary, &mut leaves);
            let tree = evaluate_bottom_up(leaves, 0.0)?;
            return Ok(Some(HnCertificate { tree, target: atoms }));
        }
    }
    Ok(None)
}

fn emit_leaves(
    mask: usize,
    depth: usize,
    reachable: &[Vec<Option<usize>>],
    weight: &dyn Fn(usize) -> Rational,
    bary: &dyn Fn(usize) -> Matrix<Rational>,
    out: &mut Vec<Node<Rational>>,
) {
    if depth == 0 || mask.count_ones() == 1 {
        let copies = 1usize << depth;
        let w = weight(mask) / Rational::from_integer(copies.into());
        out.extend((0..copies).map(|_| Node { weight: w.clone(), point: bary(mask) }));
        return;
    }
    // The shallowest depth at which this mask splits is where the DP stored it.
    let first = (0..=depth).find_map(|d| reachable[d][mask]).expect("mask reachable");
    emit_leaves(first, depth - 1, reachable, weight, bary, out);
    emit_leaves(mask ^ first, depth - 1, reachable, weight, bary, out);
}
