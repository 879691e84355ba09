//! Euclidean projection onto `{x : A x = b, x >= 0}` by a primal active-set
//! method. Each step solves the equality-constrained subproblem
//! `min 1/2 |x - p|^2` with the working bounds fixed at zero, in closed form
//! through the normal equations of an independent row subset.

use std::collections::BTreeSet;

use thiserror::Error;

use crate::linalg::{independent_rows, solve, Matrix};
use crate::lp::{feasible_point, LinearSystem, LpError};
use crate::scalar::{max_abs, sub_vec, Scalar};

#[derive(Clone, Debug, PartialEq)]
pub struct Projection<S> {
    pub point: Vec<S>,
    pub iterations: usize,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QpError<S: std::fmt::Debug> {
    #[error("polytope is empty (phase-one value {phase_one_value:?})")]
    Infeasible { witness: Vec<S>, phase_one_value: S },
    #[error("active-set iteration limit reached")]
    IterationLimit,
    #[error("singular subproblem in active-set step")]
    Singular,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
}

impl<S: std::fmt::Debug> From<LpError<S>> for QpError<S> {
    fn from(e: LpError<S>) -> Self {
        match e {
            LpError::Infeasible { witness, phase_one_value } => {
                QpError::Infeasible { witness, phase_one_value }
            }
            LpError::Unbounded | LpError::IterationLimit => QpError::IterationLimit,
        }
    }
}

/// Projects `target` onto the polytope. `start`, when feasible, warm-starts the
/// active set; otherwise a vertex from the simplex phase one is used.
pub fn project<S: Scalar>(
    sys: &LinearSystem<S>,
    target: &[S],
    start: Option<&[S]>,
) -> Result<Projection<S>, QpError<S>> {
    let n = sys.dim();
    if target.len() != n {
        return Err(QpError::Dimension { expected: n, got: target.len() });
    }
    let scale = f64::max(1.0, max_abs(target).to_f64());
    let feas_tol = 1e-12 * f64::max(scale, sys.a.max_abs().to_f64());
    if sys.is_feasible(target, feas_tol, 0.0) {
        return Ok(Projection { point: target.to_vec(), iterations: 0 });
    }

    let mut x = match start {
        Some(s) if sys.is_feasible(s, 1e-9, 1e-12) => s.to_vec(),
        _ => feasible_point(sys)?,
    };
    let bound_tol = 1e-13 * scale;
    let mut working: BTreeSet<usize> = BTreeSet::new();
    for (j, v) in x.iter_mut().enumerate() {
        if v.is_negligible(bound_tol) || *v < S::zero() {
            *v = S::zero();
            working.insert(j);
        }
    }

    let step_tol = 1e-12 * scale;
    let mult_tol = 1e-10 * scale;
    let max_iter = 20 * n + 100;
    for iter in 1..=max_iter {
        let (candidate, mult) = equality_step(sys, target, &working)?;
        let d = sub_vec(&candidate, &x);
        if max_abs(&d).is_negligible(step_tol) {
            // Stationary on the working set; release the most negative multiplier.
            let release = mult
                .iter()
                .filter(|(_, mu)| *mu < S::zero() && !mu.is_negligible(mult_tol))
                .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap_or(std::cmp::Ordering::Equal))
                .map(|(j, _)| *j);
            match release {
                None => return Ok(Projection { point: candidate, iterations: iter }),
                Some(j) => {
                    x = candidate;
                    working.remove(&j);
                }
            }
            continue;
        }
        let mut alpha = S::one();
        let mut blocking: Option<usize> = None;
        for j in 0..n {
            if working.contains(&j) || d[j] >= S::zero() || d[j].is_negligible(step_tol) {
                continue;
            }
            let ratio = -x[j].clone() / d[j].clone();
            if ratio < alpha {
                alpha = ratio;
                blocking = Some(j);
            }
        }
        for j in 0..n {
            x[j] = x[j].clone() + alpha.clone() * d[j].clone();
        }
        if let Some(j) = blocking {
            x[j] = S::zero();
            working.insert(j);
        }
        for v in x.iter_mut() {
            if *v < S::zero() {
                *v = S::zero();
            }
        }
    }
    Err(QpError::IterationLimit)
}

type Multipliers<S> = Vec<(usize, S)>;

/// Minimizer of `1/2 |x - p|^2` subject to `A x = b` and `x_j = 0` for the
/// working set, plus the bound multipliers of the working set.
fn equality_step<S: Scalar>(
    sys: &LinearSystem<S>,
    p: &[S],
    working: &BTreeSet<usize>,
) -> Result<(Vec<S>, Multipliers<S>), QpError<S>> {
    let n = sys.dim();
    let free: Vec<usize> = (0..n).filter(|j| !working.contains(j)).collect();
    let a_free = sys.a.select_columns(&free);
    let rows = independent_rows(&a_free);
    let mut x = vec![S::zero(); n];
    let z: Vec<S> = if rows.is_empty() {
        Vec::new()
    } else {
        let ar = a_free.select_rows(&rows);
        let p_free: Vec<S> = free.iter().map(|&j| p[j].clone()).collect();
        let ap = ar.mul_vec(&p_free);
        let rhs: Vec<S> = rows.iter().zip(ap).map(|(&r, v)| v - sys.b[r].clone()).collect();
        let gram = gram(&ar);
        solve(&gram, &rhs).ok_or(QpError::Singular)?
    };
    // x_F = p_F - A_R^T z
    for (k, &j) in free.iter().enumerate() {
        let mut v = p[j].clone();
        for (zi, &r) in z.iter().zip(&rows) {
            v = v - a_free.get(r, k).clone() * zi.clone();
        }
        x[j] = v;
    }
    // Gradient x - p = A^T lambda + mu with lambda = -z on the kept rows.
    let mut mult = Vec::with_capacity(working.len());
    for &j in working {
        let mut mu = -p[j].clone();
        for (zi, &r) in z.iter().zip(&rows) {
            mu = mu + sys.a.get(r, j).clone() * zi.clone();
        }
        mult.push((j, mu));
    }
    Ok((x, mult))
}

fn gram<S: Scalar>(a: &Matrix<S>) -> Matrix<S> {
    let r = a.rows();
    let mut g = Matrix::zeros(r, r);
    for i in 0..r {
        for j in i..r {
            let v = crate::scalar::dot(a.row(i), a.row(j));
            g.set(i, j, v.clone());
            g.set(j, i, v);
        }
    }
    g
}
