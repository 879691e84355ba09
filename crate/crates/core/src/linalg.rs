//! Small dense matrices and Gaussian elimination over any [`Scalar`].

use crate::scalar::{max_abs, Scalar};

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix<S> {
    rows: usize,
    cols: usize,
    data: Vec<S>,
}

impl<S: Scalar> Matrix<S> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![S::zero(); rows * cols] }
    }

    pub fn from_rows(rows: &[Vec<S>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        Self {
            rows: rows.len(),
            cols,
            data: rows.iter().flat_map(|r| r.iter().cloned()).collect(),
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<S>) -> Self {
        assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn get(&self, r: usize, c: usize) -> &S {
        &self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: S) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[S] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_vecs(&self) -> Vec<Vec<S>> {
        (0..self.rows).map(|r| self.row(r).to_vec()).collect()
    }

    pub fn push_row(&mut self, row: &[S]) {
        if self.rows == 0 && self.cols == 0 {
            self.cols = row.len();
        }
        assert_eq!(row.len(), self.cols);
        self.data.extend_from_slice(row);
        self.rows += 1;
    }

    pub fn mul_vec(&self, x: &[S]) -> Vec<S> {
        assert_eq!(x.len(), self.cols);
        (0..self.rows).map(|r| crate::scalar::dot(self.row(r), x)).collect()
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.set(c, r, self.get(r, c).clone());
            }
        }
        out
    }

    pub fn select_columns(&self, cols: &[usize]) -> Self {
        let mut out = Self::zeros(self.rows, cols.len());
        for r in 0..self.rows {
            for (k, &c) in cols.iter().enumerate() {
                out.set(r, k, self.get(r, c).clone());
            }
        }
        out
    }

    pub fn select_rows(&self, rows: &[usize]) -> Self {
        Self::from_rows(&rows.iter().map(|&r| self.row(r).to_vec()).collect::<Vec<_>>())
    }

    pub fn scale(&self, c: &S) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|x| c.clone() * x.clone()).collect(),
        }
    }

    pub fn add(&self, other: &Self) -> Self {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a.clone() + b.clone()).collect(),
        }
    }

    pub fn sub(&self, other: &Self) -> Self {
        self.add(&other.scale(&-S::one()))
    }

    pub fn is_zero(&self, tol: f64) -> bool {
        self.data.iter().all(|x| x.is_negligible(tol))
    }

    pub fn max_abs(&self) -> S {
        max_abs(&self.data)
    }

    pub fn approx_eq(&self, other: &Self, tol: f64) -> bool {
        self.rows == other.rows
            && self.cols == other.cols
            && self.data.iter().zip(&other.data).all(|(a, b)| S::approx_eq(a, b, tol))
    }

    /// Largest absolute 2x2 minor; rank <= 1 iff this vanishes.
    pub fn max_minor(&self) -> S {
        let mut worst = S::zero();
        for r1 in 0..self.rows {
            for r2 in (r1 + 1)..self.rows {
                for c1 in 0..self.cols {
                    for c2 in (c1 + 1)..self.cols {
                        let m = self.get(r1, c1).clone() * self.get(r2, c2).clone()
                            - self.get(r1, c2).clone() * self.get(r2, c1).clone();
                        worst = S::max_of(worst, m.abs());
                    }
                }
            }
        }
        worst
    }
}

/// Pivot threshold relative to the largest entry; exact path pivots on any nonzero.
fn pivot_tol<S: Scalar>(scale: &S) -> f64 {
    1e-11 * f64::max(1.0, scale.to_f64())
}

/// In-place reduced row echelon form. Returns the pivot column of each pivot row.
pub fn rref<S: Scalar>(m: &mut Matrix<S>) -> Vec<usize> {
    let tol = pivot_tol(&m.max_abs());
    let mut pivots = Vec::new();
    let mut row = 0;
    for col in 0..m.cols {
        if row == m.rows {
            break;
        }
        // Partial pivoting on the float path; first nonzero on the exact path.
        let mut best: Option<usize> = None;
        for r in row..m.rows {
            let v = m.get(r, col);
            if v.is_negligible(tol) {
                continue;
            }
            match best {
                None => best = Some(r),
                Some(b) if !S::EXACT && v.abs() > m.get(b, col).abs() => best = Some(r),
                _ => {}
            }
            if S::EXACT {
                break;
            }
        }
        let Some(p) = best else {
            for r in row..m.rows {
                m.set(r, col, S::zero());
            }
            continue;
        };
        if p != row {
            for c in 0..m.cols {
                m.data.swap(p * m.cols + c, row * m.cols + c);
            }
        }
        let inv = S::one() / m.get(row, col).clone();
        for c in col..m.cols {
            let v = m.get(row, c).clone() * inv.clone();
            m.set(row, c, v);
        }
        for r in 0..m.rows {
            if r == row {
                continue;
            }
            let f = m.get(r, col).clone();
            if f.is_zero() {
                continue;
            }
            for c in col..m.cols {
                let v = m.get(r, c).clone() - f.clone() * m.get(row, c).clone();
                m.set(r, c, v);
            }
            m.set(r, col, S::zero());
        }
        pivots.push(col);
        row += 1;
    }
    pivots
}

pub fn rank<S: Scalar>(m: &Matrix<S>) -> usize {
    let mut work = m.clone();
    rref(&mut work).len()
}

/// Indices of a maximal linearly independent subset of the rows, chosen
/// greedily in order (pivot columns of the transposed system).
pub fn independent_rows<S: Scalar>(m: &Matrix<S>) -> Vec<usize> {
    let mut work = m.transpose();
    rref(&mut work)
}

/// Solves `A x = b` for square nonsingular `A`. Returns `None` when singular.
pub fn solve<S: Scalar>(a: &Matrix<S>, b: &[S]) -> Option<Vec<S>> {
    let n = a.rows();
    assert_eq!(a.cols(), n);
    let mut aug = Matrix::zeros(n, n + 1);
    for r in 0..n {
        for c in 0..n {
            aug.set(r, c, a.get(r, c).clone());
        }
        aug.set(r, n, b[r].clone());
    }
    let piv = rref(&mut aug);
    if piv.len() < n || piv.iter().enumerate().any(|(i, &c)| c != i) {
        return None;
    }
    Some((0..n).map(|r| aug.get(r, n).clone()).collect())
}

/// Any solution of a possibly rank-deficient consistent system `A x = b`
/// (free variables set to zero). `None` when inconsistent.
pub fn solve_consistent<S: Scalar>(a: &Matrix<S>, b: &[S], tol: f64) -> Option<Vec<S>> {
    let (rows, cols) = (a.rows(), a.cols());
    let mut aug = Matrix::zeros(rows, cols + 1);
    for r in 0..rows {
        for c in 0..cols {
            aug.set(r, c, a.get(r, c).clone());
        }
        aug.set(r, cols, b[r].clone());
    }
    let piv = rref(&mut aug);
    if piv.last() == Some(&cols) {
        return None;
    }
    for r in piv.len()..rows {
        if !aug.get(r, cols).is_negligible(tol) {
            return None;
        }
    }
    let mut x = vec![S::zero(); cols];
    for (r, &c) in piv.iter().enumerate() {
        x[c] = aug.get(r, cols).clone();
    }
    Some(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scalar::{rat, Rational};

    #[test]
    fn rank_of_dependent_rows() {
        let m = Matrix::from_rows(&[
            vec![rat(1, 1), rat(1, 1), rat(0, 1)],
            vec![rat(0, 1), rat(1, 1), rat(1, 1)],
            vec![rat(1, 1), rat(2, 1), rat(1, 1)],
        ]);
        assert_eq!(rank(&m), 2);
        assert_eq!(independent_rows(&m), vec![0, 1]);
    }

    #[test]
    fn solve_exact_and_float() {
        let a = Matrix::from_rows(&[vec![rat(2, 1), rat(1, 1)], vec![rat(1, 1), rat(3, 1)]]);
        let x = solve(&a, &[rat(3, 1), rat(5, 1)]).unwrap();
        assert_eq!(x, vec![rat(4, 5), rat(7, 5)]);
        let af = Matrix::from_rows(&[vec![2.0, 1.0], vec![1.0, 3.0]]);
        let xf = solve(&af, &[3.0, 5.0]).unwrap();
        assert!((xf[0] - 0.8).abs() < 1e-14 && (xf[1] - 1.4).abs() < 1e-14);
        let sing = Matrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 4.0]]);
        assert!(solve(&sing, &[1.0, 2.0]).is_none());
    }

    #[test]
    fn consistent_detects_inconsistency() {
        let a: Matrix<Rational> =
            Matrix::from_rows(&[vec![rat(1, 1), rat(1, 1)], vec![rat(2, 1), rat(2, 1)]]);
        assert!(solve_consistent(&a, &[rat(1, 1), rat(3, 1)], 0.0).is_none());
        let x = solve_consistent(&a, &[rat(1, 1), rat(2, 1)], 0.0).unwrap();
        assert_eq!(x, vec![rat(1, 1), rat(0, 1)]);
    }

    #[test]
    fn minors_detect_rank_one() {
        let m = Matrix::from_rows(&[vec![rat(1, 1), rat(2, 1)], vec![rat(3, 1), rat(6, 1)]]);
        assert!(m.max_minor() == rat(0, 1));
        let m2 = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert_eq!(m2.max_minor(), 1.0);
    }
}
