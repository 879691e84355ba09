//! Joint decomposition of both components by a fixed-point search.
//!
//! Leaf weights `t` on the tuple selection induce a binary structure: node
//! weights are sums of their children, `lambda` is the weight fraction of the
//! second child (1/2 when the node is empty), node vectors are the
//! `lambda`-averages of their children, and the direction of a node is
//! `first child - second child`. On the polytope every node above the last
//! level has `lambda = 1/2`, so node vectors and directions are linear in `t`:
//!
//! ```text
//! y_i^(k)(s) = 2^k       sum_{j under (k,i)} s_j y_j
//! Y_i^(k)(s) = 2^(k+1) ( sum_{j under first child} - sum_{j under second child} ) s_j y_j
//! ```
//!
//! `T(t)` is the set of `s` in the polytope with `Y_i^(k)(s)` parallel to
//! `X_i^(k)(t)` for all `k <= m-2`. Parallelism is imposed through the 2x2
//! minors, which are linear in `s` once `t` is fixed. A fixed point `t in T(t)`
//! makes every joint sibling difference rank one, so the leaves form a laminate.

use log::{debug, error, info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use thiserror::Error;

use crate::geometry::Triangulation;
use crate::hn::{evaluate_bottom_up, validate_certificate, CertViolation, HnCertificate, HnError, Node, RankOne};
use crate::linalg::Matrix;
use crate::lp::{minimize, LinearSystem};
use crate::pwa::{merge, GradientMeasure, PeriodicPwaMap};
use crate::qp::{project, QpError};
use crate::scalar::{dot, max_abs, parallel, sub_vec, Scalar};
use crate::theta::{build_theta, select_tuples, ThetaError, ThetaPolytope, TupleSelection};

#[derive(Clone, Debug, PartialEq)]
pub struct FixedPointConfig {
    pub tol_parallel: f64,
    pub tol_convergence: f64,
    pub tol_membership: f64,
    /// Budget of projections across all restarts and escalations.
    pub max_iter: usize,
    pub max_restarts: usize,
    pub max_depth_escalations: usize,
    /// Iterations without convergence before a restart.
    pub stagnation_window: usize,
    pub seed: u64,
    /// Largest accepted forward-model residual of a refit.
    pub refit_tol: f64,
}

impl Default for FixedPointConfig {
    fn default() -> Self {
        Self {
            tol_parallel: 1e-9,
            tol_convergence: 1e-9,
            tol_membership: 1e-10,
            max_iter: 400,
            max_restarts: 4,
            max_depth_escalations: 1,
            stagnation_window: 40,
            seed: 0,
            refit_tol: 1e-8,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FixedPointError {
    #[error("weights lie outside the polytope")]
    OutsideTheta,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error(transparent)]
    Theta(#[from] ThetaError),
    #[error(transparent)]
    Hn(#[from] HnError),
    #[error("joint tree is not a valid laminate: {}", describe(.0))]
    InvalidJointTree(Vec<CertViolation>),
}

fn describe(v: &[CertViolation]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ")
}

/// Full recursion data for one weight vector.
#[derive(Clone, Debug, PartialEq)]
pub struct HnStructure<S> {
    pub m: usize,
    /// `weights[k][i]`, absolute.
    pub weights: Vec<Vec<S>>,
    /// `lambdas[k][i]` for `k < m`: weight fraction of the second child.
    pub lambdas: Vec<Vec<S>>,
    pub x: Vec<Vec<Vec<S>>>,
    pub y: Vec<Vec<Vec<S>>>,
    /// Directions `first - second` for `k < m`.
    pub dx: Vec<Vec<Vec<S>>>,
    pub dy: Vec<Vec<Vec<S>>>,
}

fn check_dim<S>(t: &[S], n: usize) -> Result<(), FixedPointError> {
    if t.len() != n {
        return Err(FixedPointError::Dimension { expected: n, got: t.len() });
    }
    Ok(())
}

/// Evaluates the recursion for `t` (tolerant membership in the polytope).
pub fn evaluate_profile<S: Scalar>(
    t: &[S],
    sel: &TupleSelection<S>,
    theta: &ThetaPolytope<S>,
) -> Result<HnStructure<S>, FixedPointError> {
    check_dim(t, sel.leaves())?;
    if !theta.contains(t) {
        return Err(FixedPointError::OutsideTheta);
    }
    Ok(profile_unchecked(t, sel))
}

fn profile_unchecked<S: Scalar>(t: &[S], sel: &TupleSelection<S>) -> HnStructure<S> {
    let m = sel.m;
    let mut weights = vec![Vec::new(); m + 1];
    let mut x = vec![Vec::new(); m + 1];
    let mut y = vec![Vec::new(); m + 1];
    let mut lambdas = vec![Vec::new(); m];
    let mut dx = vec![Vec::new(); m];
    let mut dy = vec![Vec::new(); m];
    weights[m] = t.to_vec();
    x[m] = sel.x.clone();
    y[m] = sel.y.clone();
    let mix = |a: &[S], b: &[S], lam: &S| -> Vec<S> {
        a.iter()
            .zip(b)
            .map(|(p, q)| (S::one() - lam.clone()) * p.clone() + lam.clone() * q.clone())
            .collect()
    };
    for k in (0..m).rev() {
        for i in 0..(1 << k) {
            let (w0, w1) = (weights[k + 1][2 * i].clone(), weights[k + 1][2 * i + 1].clone());
            let w = w0 + w1.clone();
            let lam = if w.is_negligible(0.0) { S::half() } else { w1 / w.clone() };
            weights[k].push(w);
            let (xm, ym) = (mix(&x[k + 1][2 * i], &x[k + 1][2 * i + 1], &lam), mix(&y[k + 1][2 * i], &y[k + 1][2 * i + 1], &lam));
            x[k].push(xm);
            y[k].push(ym);
            dx[k].push(sub_vec(&x[k + 1][2 * i], &x[k + 1][2 * i + 1]));
            dy[k].push(sub_vec(&y[k + 1][2 * i], &y[k + 1][2 * i + 1]));
            lambdas[k].push(lam);
        }
    }
    HnStructure { m, weights, lambdas, x, y, dx, dy }
}

/// `2^k sum_{j under (k,i)} s_j p_j`.
pub fn linear_node_vector<S: Scalar>(points: &[Vec<S>], s: &[S], m: usize, k: usize, i: usize) -> Vec<S> {
    let span = 1usize << (m - k);
    let d = points[0].len();
    let mut acc = vec![S::zero(); d];
    for j in i * span..(i + 1) * span {
        for c in 0..d {
            acc[c] = acc[c].clone() + s[j].clone() * points[j][c].clone();
        }
    }
    let scale = S::pow2(k as i32);
    acc.into_iter().map(|v| scale.clone() * v).collect()
}

/// `2^(k+1) (sum_first - sum_second) s_j p_j`, valid for `k <= m-2` on the polytope.
pub fn linear_direction<S: Scalar>(points: &[Vec<S>], s: &[S], m: usize, k: usize, i: usize) -> Vec<S> {
    let a = linear_node_vector(points, s, m, k + 1, 2 * i);
    let b = linear_node_vector(points, s, m, k + 1, 2 * i + 1);
    sub_vec(&a, &b)
}

/// Coefficients `c_j` with `Y_i^(k)(s) = sum_j c_j s_j y_j`.
fn direction_coefficients<S: Scalar>(m: usize, k: usize, i: usize) -> Vec<(usize, S)> {
    let span = 1usize << (m - k - 1);
    let c = S::pow2(k as i32 + 1);
    (2 * i * span..(2 * i + 2) * span)
        .map(|j| (j, if j < (2 * i + 1) * span { c.clone() } else { -c.clone() }))
        .collect()
}

/// Below this (relative) size a direction counts as zero and imposes nothing.
fn zero_direction_tol<S: Scalar>(points: &[Vec<S>]) -> f64 {
    let scale = points.iter().map(|p| max_abs(p).to_f64()).fold(1.0, f64::max);
    1e-12 * scale
}

/// `T(t)` as an explicit polytope.
#[derive(Clone, Debug, PartialEq)]
pub struct TPolytope<S> {
    pub system: LinearSystem<S>,
    pub theta_rows: usize,
    pub parallel_rows: usize,
    /// Nodes `(k, i)` whose direction constrains `s`.
    pub constrained: Vec<(usize, usize)>,
    /// Nodes with zero direction (no constraint).
    pub free: Vec<(usize, usize)>,
}

/// Appends the minor rows forcing `Y_i^(k)(s) || dir` on leaf vectors `y`.
fn push_parallel_rows<S: Scalar>(
    a: &mut Matrix<S>,
    b: &mut Vec<S>,
    y: &[Vec<S>],
    dir: &[S],
    m: usize,
    k: usize,
    i: usize,
) -> usize {
    let n = y.len();
    let d = dir.len();
    let norm = if S::EXACT { S::one() } else { S::one() / max_abs(dir) };
    let coeffs = direction_coefficients::<S>(m, k, i);
    let mut rows = 0;
    for p in 0..d {
        for q in (p + 1)..d {
            let mut row = vec![S::zero(); n];
            for (j, c) in &coeffs {
                let minor = dir[p].clone() * y[*j][q].clone() - dir[q].clone() * y[*j][p].clone();
                row[*j] = norm.clone() * c.clone() * minor;
            }
            a.push_row(&row);
            b.push(S::zero());
            rows += 1;
        }
    }
    rows
}

pub fn build_t<S: Scalar>(
    t: &[S],
    sel: &TupleSelection<S>,
    theta: &ThetaPolytope<S>,
) -> Result<TPolytope<S>, FixedPointError> {
    let profile = evaluate_profile(t, sel, theta)?;
    Ok(build_t_from_directions(&profile.dx, sel, theta))
}

fn build_t_from_directions<S: Scalar>(
    dirs: &[Vec<Vec<S>>],
    sel: &TupleSelection<S>,
    theta: &ThetaPolytope<S>,
) -> TPolytope<S> {
    let mut a = theta.system.a.clone();
    let mut b = theta.system.b.clone();
    let theta_rows = a.rows();
    let ztol = zero_direction_tol(&sel.x);
    let mut constrained = Vec::new();
    let mut free = Vec::new();
    let mut parallel_rows = 0;
    for k in 0..sel.m.saturating_sub(1) {
        for i in 0..(1 << k) {
            let dir = &dirs[k][i];
            if max_abs(dir).is_negligible(ztol) {
                free.push((k, i));
                continue;
            }
            parallel_rows += push_parallel_rows(&mut a, &mut b, &sel.y, dir, sel.m, k, i);
            constrained.push((k, i));
        }
    }
    TPolytope { system: LinearSystem::new(a, b), theta_rows, parallel_rows, constrained, free }
}

/// `s in T(t)`, checked directly with the scale-free parallelism test.
pub fn member_t<S: Scalar>(
    s: &[S],
    t: &[S],
    sel: &TupleSelection<S>,
    theta: &ThetaPolytope<S>,
    cfg: &FixedPointConfig,
) -> Result<bool, FixedPointError> {
    check_dim(s, sel.leaves())?;
    check_dim(t, sel.leaves())?;
    if !theta.contains(s) {
        return Ok(false);
    }
    let profile = evaluate_profile(t, sel, theta)?;
    for k in 0..sel.m.saturating_sub(1) {
        for i in 0..(1 << k) {
            let ys = linear_direction(&sel.y, s, sel.m, k, i);
            if !parallel(&ys, &profile.dx[k][i], cfg.tol_parallel) {
                return Ok(false);
            }
        }
    }
    Ok(true)
}

#[derive(Clone, Debug, PartialEq)]
pub enum FailureReason<S> {
    NonConvergence,
    /// `T(t_n)` was empty; the witness certifies it.
    InfeasibleT { iteration: usize, witness: Vec<S>, phase_one_value: S },
    Solver(String),
}

#[derive(Clone, Debug, PartialEq)]
pub enum Outcome<S> {
    Converged,
    DepthEscalated,
    Failed(FailureReason<S>),
}

impl<S> Outcome<S> {
    pub fn label(&self) -> &'static str {
        match self {
            Outcome::Converged => "converged",
            Outcome::DepthEscalated => "depth-escalated",
            Outcome::Failed(_) => "failed",
        }
    }

    pub fn succeeded(&self) -> bool {
        !matches!(self, Outcome::Failed(_))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FixedPointReport<S> {
    pub outcome: Outcome<S>,
    /// `|t_{n+1} - t_n|_inf` per projection.
    pub history: Vec<f64>,
    pub t_star: Option<Vec<S>>,
    /// Index of the accepted iterate (0 when the start is already fixed).
    pub iterations: usize,
    pub projections: usize,
    pub restarts: usize,
    pub escalations: usize,
    pub final_distance: f64,
    /// Selection the final iterate lives on (deeper after escalation).
    pub selection: TupleSelection<S>,
}

impl<S: Scalar> FixedPointReport<S> {
    pub fn to_json(&self, certificate_path: Option<&str>) -> Value {
        let reason = match &self.outcome {
            Outcome::Failed(FailureReason::NonConvergence) => json!({"kind": "non-convergence"}),
            Outcome::Failed(FailureReason::InfeasibleT { iteration, witness, phase_one_value }) => json!({
                "kind": "empty-T",
                "iteration": iteration,
                "phase_one_value": phase_one_value.encode(),
                "witness": witness.iter().map(Scalar::encode).collect::<Vec<_>>(),
            }),
            Outcome::Failed(FailureReason::Solver(msg)) => json!({"kind": "solver", "message": msg}),
            _ => Value::Null,
        };
        json!({
            "outcome": self.outcome.label(),
            "reason": reason,
            "iterations": self.iterations,
            "projections": self.projections,
            "restarts": self.restarts,
            "escalations": self.escalations,
            "depth": self.selection.m,
            "final_distance": self.final_distance.encode(),
            "history": self.history.iter().map(Scalar::encode).collect::<Vec<_>>(),
            "t_star": self.t_star.as_ref().map(|t| t.iter().map(Scalar::encode).collect::<Vec<_>>()),
            "certificate_path": certificate_path,
        })
    }
}

/// Material needed to rebuild a deeper selection on escalation.
pub struct Escalation<'a, S> {
    pub measure: &'a GradientMeasure<S>,
    pub tri: &'a Triangulation,
}

fn step_norm<S: Scalar>(a: &[S], b: &[S]) -> f64 {
    max_abs(&sub_vec(a, b)).to_f64()
}

/// Random point of the polytope: a convex mixture of a few vertices found by
/// minimizing random costs.
pub fn random_theta_point<S: Scalar>(theta: &ThetaPolytope<S>, rng: &mut ChaCha8Rng) -> Option<Vec<S>> {
    let n = theta.dim();
    let mut mix = vec![S::zero(); n];
    let mut total = S::zero();
    for _ in 0..3 {
        let cost: Vec<S> = (0..n).map(|_| S::from_f64_lossy(rng.gen_range(-16i32..=16) as f64 / 16.0)).collect();
        let v = minimize(&theta.system, &cost).ok()?;
        let w = S::from_i64(rng.gen_range(1..=8));
        for (acc, x) in mix.iter_mut().zip(v) {
            *acc = acc.clone() + w.clone() * x;
        }
        total = total + w;
    }
    Some(mix.into_iter().map(|x| x / total.clone()).collect())
}

/// Projection iteration `t_{n+1} = argmin_{s in T(t_n)} |s - t_n|` from the
/// selection weights, with random restarts on stagnation and depth escalation
/// when restarts run out.
pub fn find_fixed_point<S: Scalar>(
    sel: &TupleSelection<S>,
    cfg: &FixedPointConfig,
    escalation: Option<Escalation<'_, S>>,
) -> Result<FixedPointReport<S>, FixedPointError> {
    let mut sel = sel.clone();
    let mut theta = build_theta(&sel)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut history = Vec::new();
    let (mut restarts, mut escalations, mut projections) = (0, 0, 0);
    let mut t = sel.t_bar.clone();
    let mut n = 0;
    let mut since_restart = 0;
    let mut last_step = f64::INFINITY;

    let finish = |outcome, t_star, n, history, projections, restarts, escalations, step, sel| {
        Ok(FixedPointReport {
            outcome,
            history,
            t_star,
            iterations: n,
            projections,
            restarts,
            escalations,
            final_distance: step,
            selection: sel,
        })
    };

    loop {
        if projections >= cfg.max_iter {
            warn!("fixed-point budget of {} projections exhausted", cfg.max_iter);
            return finish(
                Outcome::Failed(FailureReason::NonConvergence),
                None,
                n,
                history,
                projections,
                restarts,
                escalations,
                last_step,
                sel,
            );
        }
        let tp = build_t(&t, &sel, &theta)?;
        projections += 1;
        let s = match project(&tp.system, &t, None) {
            Ok(p) => p.point,
            Err(QpError::Infeasible { witness, phase_one_value }) => {
                error!(
                    "T(t) is empty at iteration {n} (depth {}); phase-one value {:?}",
                    sel.m, phase_one_value
                );
                return finish(
                    Outcome::Failed(FailureReason::InfeasibleT { iteration: n, witness, phase_one_value }),
                    None,
                    n,
                    history,
                    projections,
                    restarts,
                    escalations,
                    last_step,
                    sel,
                );
            }
            Err(e) => {
                return finish(
                    Outcome::Failed(FailureReason::Solver(e.to_string())),
                    None,
                    n,
                    history,
                    projections,
                    restarts,
                    escalations,
                    last_step,
                    sel,
                )
            }
        };
        let step = step_norm(&s, &t);
        history.push(step);
        last_step = step;
        debug!("iteration {n}: step {step:e}");
        let close = if S::EXACT { s == t } else { step <= cfg.tol_convergence };
        if close && member_t(&s, &s, &sel, &theta, cfg)? {
            info!("converged at iteration {n} after {restarts} restarts, {escalations} escalations");
            let outcome = if escalations == 0 { Outcome::Converged } else { Outcome::DepthEscalated };
            return finish(outcome, Some(s), n, history, projections, restarts, escalations, step, sel);
        }
        t = s;
        n += 1;
        since_restart += 1;
        if since_restart < cfg.stagnation_window {
            continue;
        }
        since_restart = 0;
        if restarts < cfg.max_restarts {
            restarts += 1;
            if let Some(p) = random_theta_point(&theta, &mut rng) {
                debug!("restart {restarts} from a random polytope point");
                t = p;
            }
            continue;
        }
        match &escalation {
            Some(esc) if escalations < cfg.max_depth_escalations => {
                escalations += 1;
                restarts = 0;
                sel = select_tuples(esc.measure, esc.tri, Some(sel.m + 1))?;
                theta = build_theta(&sel)?;
                t = sel.t_bar.clone();
                info!("escalating to depth {}", sel.m);
            }
            _ => {
                // Keep iterating until the budget is spent.
            }
        }
    }
}

/// Joint measure `sum_e lambda_e delta_(u_e, v_e)` of a selection, merged.
pub fn joint_target<S: Scalar>(sel: &TupleSelection<S>, tol: f64) -> Vec<(Matrix<S>, S)> {
    merge(
        sel.element_weights.iter().enumerate().map(|(e, w)| {
            let j = sel.element_of.iter().position(|&x| x == e).expect("every element occurs");
            (Matrix::from_rows(&[sel.x[j].clone(), sel.y[j].clone()]), w.clone())
        }),
        tol,
    )
}

/// Tree whose leaves carry `t_j` and the joint matrices `(x_j; y_j)`.
pub fn joint_tree_certificate<S: Scalar>(
    t: &[S],
    sel: &TupleSelection<S>,
    tol: f64,
) -> Result<HnCertificate<S>, FixedPointError> {
    check_dim(t, sel.leaves())?;
    let leaves = t
        .iter()
        .zip(sel.x.iter().zip(&sel.y))
        .map(|(w, (x, y))| Node { weight: w.clone(), point: Matrix::from_rows(&[x.clone(), y.clone()]) })
        .collect();
    let tree = evaluate_bottom_up(leaves, tol)?;
    let scale = sel.x.iter().chain(&sel.y).map(|p| max_abs(p).to_f64()).fold(1.0, f64::max);
    Ok(HnCertificate { tree, target: joint_target(sel, tol * scale) })
}

/// Assembles the joint laminate at `t_star` and validates it against the
/// rank-one cone; any violation is an error naming the node.
pub fn verify_joint_laminate<S: Scalar>(
    t_star: &[S],
    sel: &TupleSelection<S>,
    cfg: &FixedPointConfig,
) -> Result<HnCertificate<S>, FixedPointError> {
    let cert = joint_tree_certificate(t_star, sel, cfg.tol_membership)?;
    let report = validate_certificate(&cert, &RankOne, cfg.tol_parallel);
    if !report.is_valid() {
        return Err(FixedPointError::InvalidJointTree(report.violations));
    }
    Ok(cert)
}

/// Directions `V_i^(k)` frozen from a baseline, with the interface normal
/// substituted for vanishing last-level directions.
#[derive(Clone, Debug, PartialEq)]
pub struct Directions<S> {
    pub m: usize,
    pub levels: Vec<Vec<Vec<S>>>,
}

impl<S: Scalar> Directions<S> {
    pub fn from_profile(profile: &HnStructure<S>, sel: &TupleSelection<S>) -> Self {
        let mut levels = profile.dx.clone();
        let ztol = zero_direction_tol(&sel.x);
        if let Some(last) = levels.last_mut() {
            for (k, v) in last.iter_mut().enumerate() {
                if max_abs(v).is_negligible(ztol) {
                    *v = sel.pair_normals[k].iter().map(|c| S::from_i64(*c)).collect();
                }
            }
        }
        Self { m: profile.m, levels }
    }
}

/// Scalar (or free vector, where the direction vanishes) split amplitude.
#[derive(Clone, Debug, PartialEq)]
pub enum Amplitude<S> {
    Along(S),
    Free(Vec<S>),
}

/// The refit's variables: amplitudes for `k <= m-2` and the two one-sided
/// amplitudes of every last-level node.
#[derive(Clone, Debug, PartialEq)]
pub struct SVariables<S> {
    pub inner: Vec<Vec<Amplitude<S>>>,
    pub last: Vec<(S, S)>,
}

impl<S: Scalar> SVariables<S> {
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for level in &self.inner {
            for a in level {
                match a {
                    Amplitude::Along(s) => out.push(s.to_f64()),
                    Amplitude::Free(v) => out.extend(v.iter().map(Scalar::to_f64)),
                }
            }
        }
        for (p, q) in &self.last {
            out.push(p.to_f64());
            out.push(q.to_f64());
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Refit<S> {
    pub s: Vec<S>,
    pub variables: SVariables<S>,
    /// Largest leaf mismatch of the forward model driven by the variables.
    pub residual: f64,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RefitError {
    #[error("no weights realize the frozen directions (phase-one value {0:e})")]
    NoSolution(f64),
    #[error("forward-model residual {0:e} above tolerance")]
    Residual(f64),
    #[error("projection failed: {0}")]
    Solver(String),
    #[error(transparent)]
    Fixed(#[from] FixedPointError),
}

/// Amplitudes that reproduce `y` leaves from the frozen directions at `s`.
pub fn amplitudes<S: Scalar>(s: &[S], y: &[Vec<S>], dirs: &Directions<S>) -> SVariables<S> {
    let m = dirs.m;
    let mut inner = Vec::new();
    for k in 0..m.saturating_sub(1) {
        let mut level = Vec::new();
        for i in 0..(1 << k) {
            let big_y = linear_direction(y, s, m, k, i);
            let v = &dirs.levels[k][i];
            let vv = dot(v, v);
            if vv.is_negligible(0.0) {
                level.push(Amplitude::Free(big_y.into_iter().map(|c| c * S::half()).collect()));
            } else {
                level.push(Amplitude::Along(dot(&big_y, v) / (S::two() * vv)));
            }
        }
        inner.push(level);
    }
    let mut last = Vec::new();
    if m >= 1 {
        for i in 0..(1 << (m - 1)) {
            let (a, b) = (s[2 * i].clone(), s[2 * i + 1].clone());
            let w = a.clone() + b.clone();
            let lam = if w.is_negligible(0.0) { S::half() } else { b / w };
            let big_y = sub_vec(&y[2 * i], &y[2 * i + 1]);
            let v = &dirs.levels[m - 1][i];
            let proj = dot(&big_y, v) / dot(v, v);
            last.push((lam.clone() * proj.clone(), (S::one() - lam) * proj));
        }
    }
    SVariables { inner, last }
}

/// Leaves produced top-down from `root` by the amplitudes and directions.
pub fn forward_leaves<S: Scalar>(root: &[S], vars: &SVariables<S>, dirs: &Directions<S>) -> Vec<Vec<S>> {
    let m = dirs.m;
    let mut level = vec![root.to_vec()];
    for k in 0..m.saturating_sub(1) {
        let mut next = Vec::with_capacity(level.len() * 2);
        for (i, y) in level.iter().enumerate() {
            let delta: Vec<S> = match &vars.inner[k][i] {
                Amplitude::Along(a) => dirs.levels[k][i].iter().map(|c| a.clone() * c.clone()).collect(),
                Amplitude::Free(w) => w.clone(),
            };
            next.push(y.iter().zip(&delta).map(|(p, d)| p.clone() + d.clone()).collect());
            next.push(y.iter().zip(&delta).map(|(p, d)| p.clone() - d.clone()).collect());
        }
        level = next;
    }
    if m >= 1 {
        let mut leaves = Vec::with_capacity(level.len() * 2);
        for (i, y) in level.iter().enumerate() {
            let v = &dirs.levels[m - 1][i];
            let (plus, minus) = &vars.last[i];
            leaves.push(y.iter().zip(v).map(|(p, c)| p.clone() + plus.clone() * c.clone()).collect());
            leaves.push(y.iter().zip(v).map(|(p, c)| p.clone() - minus.clone() * c.clone()).collect());
        }
        level = leaves;
    }
    level
}

/// Re-solves for weights after the second component changed to `perturbed`,
/// keeping the baseline directions. With the leaves fixed at the new
/// gradients the parallelism conditions are linear in `s`, so the refit is the
/// projection of the baseline weights onto that polytope; the amplitudes are
/// then read off and pushed through the forward model as an independent check.
pub fn direction_preserving_refit<S: Scalar>(
    sel: &TupleSelection<S>,
    dirs: &Directions<S>,
    baseline: &[S],
    perturbed: &PeriodicPwaMap<S>,
    cfg: &FixedPointConfig,
) -> Result<Refit<S>, RefitError> {
    check_dim(baseline, sel.leaves())?;
    let v: Vec<Vec<S>> = perturbed.gradient_per_element().iter().map(|g| g.row(1).to_vec()).collect();
    let new_sel = sel.with_second_component(&v);
    let theta = build_theta(&new_sel).map_err(FixedPointError::from)?;
    let tp = build_t_from_directions(&dirs.levels, &new_sel, &theta);
    let s = match project(&tp.system, baseline, None) {
        Ok(p) => p.point,
        Err(QpError::Infeasible { phase_one_value, .. }) => {
            return Err(RefitError::NoSolution(phase_one_value.to_f64()))
        }
        Err(e) => return Err(RefitError::Solver(e.to_string())),
    };
    let variables = amplitudes(&s, &new_sel.y, dirs);
    let root = linear_node_vector(&new_sel.y, &s, sel.m, 0, 0);
    let leaves = forward_leaves(&root, &variables, dirs);
    let residual = leaves
        .iter()
        .zip(&new_sel.y)
        .map(|(a, b)| step_norm(a, b))
        .fold(0.0, f64::max);
    if residual > cfg.refit_tol {
        return Err(RefitError::Residual(residual));
    }
    Ok(Refit { s, variables, residual })
}

/// Least-squares nodal values (mean zero) whose element gradients best match
/// `grads`; used to read a map back from forward-model leaves.
pub fn reconstruct_nodal_values(tri: &Triangulation, grads: &[Vec<f64>]) -> Vec<f64> {
    let q = tri.node_count();
    let dim = tri.dim();
    let rows = grads.len() * dim + 1;
    let mut a = nalgebra::DMatrix::<f64>::zeros(rows, q);
    let mut b = nalgebra::DVector::<f64>::zeros(rows);
    for (e, g) in grads.iter().enumerate() {
        let el = &tri.elements()[e];
        let nodes = tri.element_nodes(e);
        for r in 0..dim {
            let row = e * dim + r;
            for c in 0..dim {
                let coef = Scalar::to_f64(el.chart.get(r, c));
                a[(row, nodes[c + 1])] += coef;
                a[(row, nodes[0])] -= coef;
            }
            b[row] = g[r];
        }
    }
    for p in 0..q {
        a[(rows - 1, p)] = 1.0;
    }
    let svd = a.svd(true, true);
    svd.solve(&b, 1e-12).map(|x| x.iter().copied().collect()).unwrap_or_else(|_| vec![0.0; q])
}

/// Per-element gradients from leaf vectors, averaging the leaves of each element.
pub fn element_gradients_from_leaves(sel: &TupleSelection<f64>, leaves: &[Vec<f64>], elements: usize) -> Vec<Vec<f64>> {
    let d = sel.dim();
    let mut acc = vec![vec![0.0; d]; elements];
    let mut count = vec![0usize; elements];
    for (j, &e) in sel.element_of.iter().enumerate() {
        for c in 0..d {
            acc[e][c] += leaves[j][c];
        }
        count[e] += 1;
    }
    acc.into_iter()
        .zip(count)
        .map(|(v, n)| v.into_iter().map(|x| x / n.max(1) as f64).collect())
        .collect()
}
