//! Dense two-phase simplex for systems `A x = b, x >= 0`.
//!
//! Bland's rule throughout, so the exact path always terminates. Problems here
//! have at most a few hundred columns, so a full tableau is fine.

use thiserror::Error;

use crate::linalg::Matrix;
use crate::scalar::{dot, max_abs, Scalar};

/// Equality-form polyhedron `{x : A x = b, x >= 0}`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearSystem<S> {
    pub a: Matrix<S>,
    pub b: Vec<S>,
}

impl<S: Scalar> LinearSystem<S> {
    pub fn new(a: Matrix<S>, b: Vec<S>) -> Self {
        assert_eq!(a.rows(), b.len());
        Self { a, b }
    }

    pub fn dim(&self) -> usize {
        self.a.cols()
    }

    /// Largest equality violation `max |A x - b|`.
    pub fn residual(&self, x: &[S]) -> S {
        let ax = self.a.mul_vec(x);
        let diff: Vec<S> = ax.into_iter().zip(&self.b).map(|(l, r)| l - r.clone()).collect();
        max_abs(&diff)
    }

    pub fn is_feasible(&self, x: &[S], tol_eq: f64, tol_nonneg: f64) -> bool {
        x.len() == self.dim()
            && x.iter().all(|v| S::le_tol(&S::zero(), v, tol_nonneg))
            && self.residual(x).is_negligible(tol_eq)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LpError<S: std::fmt::Debug> {
    /// Farkas certificate: `A^T y <= 0` and `b^T y > 0`.
    #[error("system is infeasible (phase-one value {phase_one_value:?})")]
    Infeasible { witness: Vec<S>, phase_one_value: S },
    #[error("objective is unbounded below")]
    Unbounded,
    #[error("simplex iteration limit reached")]
    IterationLimit,
}

struct Tableau<S> {
    t: Matrix<S>,
    rhs: Vec<S>,
    basis: Vec<usize>,
    n: usize,
    eps: f64,
    dead: Vec<bool>,
}

const MAX_PIVOTS: usize = 50_000;

impl<S: Scalar> Tableau<S> {
    fn pivot(&mut self, row: usize, col: usize) {
        let p = self.t.get(row, col).clone();
        let cols = self.t.cols();
        for c in 0..cols {
            let v = self.t.get(row, c).clone() / p.clone();
            self.t.set(row, c, v);
        }
        self.rhs[row] = self.rhs[row].clone() / p;
        for r in 0..self.t.rows() {
            if r == row {
                continue;
            }
            let f = self.t.get(r, col).clone();
            if f.is_zero() {
                continue;
            }
            for c in 0..cols {
                let v = self.t.get(r, c).clone() - f.clone() * self.t.get(row, c).clone();
                self.t.set(r, c, v);
            }
            self.t.set(r, col, S::zero());
            self.rhs[r] = self.rhs[r].clone() - f * self.rhs[row].clone();
        }
        self.basis[row] = col;
    }

    fn reduced_costs(&self, cost: &[S]) -> Vec<S> {
        let mut r = cost.to_vec();
        for (row, &bcol) in self.basis.iter().enumerate() {
            if self.dead[row] || cost[bcol].is_zero() {
                continue;
            }
            for (c, rc) in r.iter_mut().enumerate() {
                *rc = rc.clone() - cost[bcol].clone() * self.t.get(row, c).clone();
            }
        }
        r
    }

    /// Runs Bland's-rule simplex on `cost` over the columns in `allowed`.
    fn optimize(&mut self, cost: &[S], allowed: usize) -> Result<(), LpError<S>> {
        for _ in 0..MAX_PIVOTS {
            let rc = self.reduced_costs(cost);
            let entering = (0..allowed).find(|&j| rc[j] < S::zero() && !rc[j].is_negligible(self.eps));
            let Some(col) = entering else {
                return Ok(());
            };
            let mut best: Option<(usize, S)> = None;
            for r in 0..self.t.rows() {
                if self.dead[r] {
                    continue;
                }
                let a = self.t.get(r, col);
                if *a <= S::zero() || a.is_negligible(self.eps) {
                    continue;
                }
                let ratio = self.rhs[r].clone() / a.clone();
                best = match best {
                    None => Some((r, ratio)),
                    Some((br, bv)) => {
                        if ratio < bv
                            || (ratio == bv && self.basis[r] < self.basis[br])
                            || (!S::EXACT
                                && S::approx_eq(&ratio, &bv, self.eps)
                                && self.basis[r] < self.basis[br])
                        {
                            Some((r, ratio))
                        } else {
                            Some((br, bv))
                        }
                    }
                };
            }
            let Some((row, _)) = best else {
                return Err(LpError::Unbounded);
            };
            self.pivot(row, col);
        }
        Err(LpError::IterationLimit)
    }

    fn solution(&self) -> Vec<S> {
        let mut x = vec![S::zero(); self.n];
        for (row, &b) in self.basis.iter().enumerate() {
            if b < self.n && !self.dead[row] {
                let v = self.rhs[row].clone();
                x[b] = if v < S::zero() { S::zero() } else { v };
            }
        }
        x
    }
}

/// Phase one: returns a feasible tableau or a Farkas witness.
fn phase_one<S: Scalar>(sys: &LinearSystem<S>) -> Result<Tableau<S>, LpError<S>> {
    let (m, n) = (sys.a.rows(), sys.a.cols());
    let scale = f64::max(1.0, f64::max(sys.a.max_abs().to_f64(), max_abs(&sys.b).to_f64()));
    let eps = 1e-10 * scale;
    let mut t = Matrix::zeros(m, n + m);
    let mut rhs = Vec::with_capacity(m);
    let mut sign = Vec::with_capacity(m);
    for r in 0..m {
        let flip = sys.b[r] < S::zero();
        let s = if flip { -S::one() } else { S::one() };
        for c in 0..n {
            t.set(r, c, s.clone() * sys.a.get(r, c).clone());
        }
        t.set(r, n + r, S::one());
        rhs.push(s.clone() * sys.b[r].clone());
        sign.push(s);
    }
    let mut tab = Tableau { t, rhs, basis: (n..n + m).collect(), n, eps, dead: vec![false; m] };
    let cost: Vec<S> = (0..n + m).map(|j| if j < n { S::zero() } else { S::one() }).collect();
    tab.optimize(&cost, n + m)?;

    let value = tab
        .basis
        .iter()
        .zip(&tab.rhs)
        .filter(|(&b, _)| b >= n)
        .fold(S::zero(), |acc, (_, v)| acc + v.clone());
    if !value.is_negligible(eps) && value > S::zero() {
        let rc = tab.reduced_costs(&cost);
        let witness = (0..m).map(|i| sign[i].clone() * (S::one() - rc[n + i].clone())).collect();
        return Err(LpError::Infeasible { witness, phase_one_value: value });
    }

    // Drive zero-level artificials out of the basis; rows that cannot be
    // pivoted are redundant.
    for row in 0..m {
        if tab.basis[row] < n {
            continue;
        }
        let col = (0..n).find(|&c| !tab.t.get(row, c).is_negligible(eps));
        match col {
            Some(c) => tab.pivot(row, c),
            None => tab.dead[row] = true,
        }
    }
    Ok(tab)
}

/// Some point of `{A x = b, x >= 0}` (a vertex), or an infeasibility witness.
pub fn feasible_point<S: Scalar>(sys: &LinearSystem<S>) -> Result<Vec<S>, LpError<S>> {
    Ok(phase_one(sys)?.solution())
}

/// Minimizes `c^T x` over `{A x = b, x >= 0}`; the optimum returned is a vertex.
pub fn minimize<S: Scalar>(sys: &LinearSystem<S>, c: &[S]) -> Result<Vec<S>, LpError<S>> {
    assert_eq!(c.len(), sys.dim());
    let mut tab = phase_one(sys)?;
    let n = sys.dim();
    let mut cost = c.to_vec();
    cost.extend((0..sys.a.rows()).map(|_| S::zero()));
    tab.optimize(&cost, n)?;
    Ok(tab.solution())
}

/// Checks a Farkas witness independently of the simplex that produced it.
pub fn certifies_infeasible<S: Scalar>(sys: &LinearSystem<S>, y: &[S], tol: f64) -> bool {
    let aty = sys.a.transpose().mul_vec(y);
    let by = dot(&sys.b, y);
    aty.iter().all(|v| S::le_tol(v, &S::zero(), tol)) && by > S::zero() && !by.is_negligible(tol)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scalar::{rat, Rational};

    fn r(v: i64) -> Rational {
        rat(v, 1)
    }

    #[test]
    fn finds_vertex_of_simplex() {
        let sys = LinearSystem::new(Matrix::from_rows(&[vec![r(1), r(1), r(1)]]), vec![r(1)]);
        let x = feasible_point(&sys).unwrap();
        assert!(sys.is_feasible(&x, 0.0, 0.0));
        let best = minimize(&sys, &[r(3), r(1), r(2)]).unwrap();
        assert_eq!(best, vec![r(0), r(1), r(0)]);
    }

    #[test]
    fn infeasible_system_yields_witness() {
        // x1 + x2 = 1 and x1 + x2 = 2.
        let sys = LinearSystem::new(
            Matrix::from_rows(&[vec![r(1), r(1)], vec![r(1), r(1)]]),
            vec![r(1), r(2)],
        );
        match feasible_point(&sys) {
            Err(LpError::Infeasible { witness, .. }) => {
                assert!(certifies_infeasible(&sys, &witness, 0.0));
            }
            other => panic!("expected infeasible, got {other:?}"),
        }
    }

    #[test]
    fn negative_rhs_and_redundant_rows() {
        let sys = LinearSystem::new(
            Matrix::from_rows(&[vec![-1.0, -1.0, 0.0], vec![2.0, 2.0, 0.0], vec![0.0, 1.0, 1.0]]),
            vec![-1.0, 2.0, 0.5],
        );
        let x = feasible_point(&sys).unwrap();
        assert!(sys.is_feasible(&x, 1e-12, 1e-12));
    }

    #[test]
    fn unbounded_detected() {
        let sys = LinearSystem::new(Matrix::from_rows(&[vec![1.0, -1.0]]), vec![0.0]);
        assert_eq!(minimize(&sys, &[-1.0, 0.0]), Err(LpError::Unbounded));
    }
}
