//! Test integrands on `2 x N` matrices and Jensen-type checks against
//! gradient measures and laminate certificates.
//!
//! Matrices are flattened row-major, so entry `(r, c)` sits at `r * N + c`.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;
use thiserror::Error;

use crate::linalg::Matrix;
use crate::pwa::GradientMeasure;
use crate::scalar::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConvexityError {
    #[error("unknown test function `{0}`")]
    Unknown(String),
    #[error("bad parameters for `{name}`: {reason}")]
    Parameters { name: String, reason: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FunctionClass {
    Convex,
    Polyconvex,
    RankOneConvex,
    RankOneAffine,
    /// Known to fail rank-one convexity.
    Neither,
}

impl FunctionClass {
    pub fn name(self) -> &'static str {
        match self {
            FunctionClass::Convex => "convex",
            FunctionClass::Polyconvex => "polyconvex",
            FunctionClass::RankOneConvex => "rank-one-convex",
            FunctionClass::RankOneAffine => "rank-one-affine",
            FunctionClass::Neither => "neither",
        }
    }
}

/// Homogeneous quadratic form `q(F) = vec(F)^T Q vec(F)` with symmetric `Q`.
#[derive(Clone, Debug, PartialEq)]
pub struct QuadraticForm {
    pub n: usize,
    pub q: Vec<Vec<f64>>,
}

impl QuadraticForm {
    pub fn new(n: usize, q: Vec<Vec<f64>>) -> Result<Self, ConvexityError> {
        let d = 2 * n;
        let bad = |reason: &str| ConvexityError::Parameters { name: "quadratic".into(), reason: reason.into() };
        if q.len() != d || q.iter().any(|r| r.len() != d) {
            return Err(bad("matrix must be 2N x 2N"));
        }
        // Symmetrize; the form only sees the symmetric part.
        let sym = (0..d).map(|i| (0..d).map(|j| 0.5 * (q[i][j] + q[j][i])).collect()).collect();
        Ok(Self { n, q: sym })
    }

    pub fn frobenius(n: usize) -> Self {
        let d = 2 * n;
        Self { n, q: (0..d).map(|i| (0..d).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect() }
    }

    /// `c * (F_{0a} F_{1b} - F_{0b} F_{1a})`.
    pub fn minor(n: usize, a: usize, b: usize, c: f64) -> Self {
        let d = 2 * n;
        let mut q = vec![vec![0.0; d]; d];
        let mut put = |i: usize, j: usize, v: f64| {
            q[i][j] += 0.5 * v;
            q[j][i] += 0.5 * v;
        };
        put(a, n + b, c);
        put(b, n + a, -c);
        Self { n, q }
    }

    pub fn add(&self, other: &Self, c: f64) -> Self {
        let q = self.q.iter().zip(&other.q).map(|(r, s)| r.iter().zip(s).map(|(x, y)| x + c * y).collect()).collect();
        Self { n: self.n, q }
    }

    pub fn eval<S: Scalar>(&self, f: &Matrix<S>) -> S {
        let x = f.data();
        let mut acc = S::zero();
        for (i, row) in self.q.iter().enumerate() {
            for (j, c) in row.iter().enumerate() {
                if *c != 0.0 {
                    acc = acc + S::from_f64_lossy(*c) * x[i].clone() * x[j].clone();
                }
            }
        }
        acc
    }

    /// `M(a)_{cd} = sum_{r,s} a_r a_s Q[(r,c),(s,d)]`, so `q(a (x) n) = n^T M(a) n`.
    fn acoustic(&self, a: [f64; 2]) -> DMatrix<f64> {
        let n = self.n;
        DMatrix::from_fn(n, n, |c, d| {
            let mut v = 0.0;
            for r in 0..2 {
                for s in 0..2 {
                    v += a[r] * a[s] * self.q[r * n + c][s * n + d];
                }
            }
            v
        })
    }

    fn min_eig(&self, theta: f64) -> f64 {
        let m = self.acoustic([theta.cos(), theta.sin()]);
        SymmetricEigen::new(m).eigenvalues.min()
    }

    pub fn scale(&self) -> f64 {
        self.q.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

/// Minimum of `q(a (x) n)` over unit `a` and unit `n`: an angle grid for `a`,
/// the smallest eigenvalue of `M(a)` for `n`, then golden-section refinement
/// around the best grid cell.
pub fn rank_one_minimum(q: &QuadraticForm) -> f64 {
    const GRID: usize = 720;
    let h = std::f64::consts::PI / GRID as f64;
    let (mut best_k, mut best) = (0, f64::INFINITY);
    for k in 0..GRID {
        let v = q.min_eig(k as f64 * h);
        if v < best {
            best = v;
            best_k = k;
        }
    }
    let (mut lo, mut hi) = ((best_k as f64 - 1.0) * h, (best_k as f64 + 1.0) * h);
    let g = (5f64.sqrt() - 1.0) / 2.0;
    for _ in 0..80 {
        let (a, b) = (hi - g * (hi - lo), lo + g * (hi - lo));
        if q.min_eig(a) < q.min_eig(b) {
            hi = b;
        } else {
            lo = a;
        }
    }
    best.min(q.min_eig(0.5 * (lo + hi)))
}

/// `q(a (x) n) >= 0` on the rank-one cone, up to `1e-12` relative to `q`.
pub fn quadratic_rank_one_test(q: &QuadraticForm) -> bool {
    rank_one_minimum(q) >= -1e-12 * q.scale().max(1.0)
}

#[derive(Clone, Debug, PartialEq)]
pub enum TestFunction {
    /// `|F|^p`, `p >= 1`.
    FrobeniusPower(u32),
    NegFrobeniusSquared,
    /// 2x2 minor of columns `(a, b)`; the determinant when `N = 2`.
    Minor(usize, usize),
    NegMinor(usize, usize),
    Quadratic(QuadraticForm),
    /// `<C, F> + c`.
    Affine { coeffs: Vec<f64>, constant: f64 },
    /// `|F|^2 + (minor_01)^2`: a convex function of `(F, minor)`.
    Polyconvex,
    Combination(Vec<(f64, TestFunction)>),
}

impl TestFunction {
    pub fn det() -> Self {
        TestFunction::Minor(0, 1)
    }

    pub fn name(&self) -> String {
        match self {
            TestFunction::FrobeniusPower(p) => format!("frobenius^{p}"),
            TestFunction::NegFrobeniusSquared => "neg-frobenius".into(),
            TestFunction::Minor(0, 1) => "det".into(),
            TestFunction::Minor(a, b) => format!("minor({a},{b})"),
            TestFunction::NegMinor(0, 1) => "neg-det".into(),
            TestFunction::NegMinor(a, b) => format!("neg-minor({a},{b})"),
            TestFunction::Quadratic(_) => "quadratic".into(),
            TestFunction::Affine { .. } => "affine".into(),
            TestFunction::Polyconvex => "polyconvex".into(),
            TestFunction::Combination(_) => "combination".into(),
        }
    }

    /// Declared class; [`rank_one_convexity_probe`] checks it by sampling.
    pub fn class(&self) -> FunctionClass {
        match self {
            TestFunction::FrobeniusPower(_) => FunctionClass::Convex,
            TestFunction::NegFrobeniusSquared => FunctionClass::Neither,
            TestFunction::Minor(..) | TestFunction::NegMinor(..) | TestFunction::Affine { .. } => {
                FunctionClass::RankOneAffine
            }
            TestFunction::Quadratic(q) => {
                if quadratic_rank_one_test(q) {
                    FunctionClass::RankOneConvex
                } else {
                    FunctionClass::Neither
                }
            }
            TestFunction::Polyconvex => FunctionClass::Polyconvex,
            TestFunction::Combination(_) => FunctionClass::Neither,
        }
    }

    /// Builds a function from a CLI name and JSON parameters.
    pub fn from_spec(name: &str, params: &Value, n: usize) -> Result<Self, ConvexityError> {
        let bad = |reason: &str| ConvexityError::Parameters { name: name.into(), reason: reason.into() };
        let uint = |key: &str, default: u64| params.get(key).map_or(Some(default), Value::as_u64).ok_or_else(|| bad(key));
        let f = match name {
            "frobenius" => {
                let p = uint("p", 2)?;
                if p == 0 {
                    return Err(bad("p must be positive"));
                }
                TestFunction::FrobeniusPower(p as u32)
            }
            "neg-frobenius" => TestFunction::NegFrobeniusSquared,
            "det" | "neg-det" | "minor" | "neg-minor" => {
                let (a, b) = (uint("a", 0)? as usize, uint("b", 1)? as usize);
                if a >= n || b >= n || a == b {
                    return Err(bad("columns out of range"));
                }
                if name.starts_with("neg") {
                    TestFunction::NegMinor(a, b)
                } else {
                    TestFunction::Minor(a, b)
                }
            }
            "polyconvex" => TestFunction::Polyconvex,
            "affine" => {
                let coeffs: Vec<f64> = params
                    .get("coeffs")
                    .and_then(Value::as_array)
                    .ok_or_else(|| bad("coeffs"))?
                    .iter()
                    .map(|v| v.as_f64().ok_or_else(|| bad("coeffs")))
                    .collect::<Result<_, _>>()?;
                if coeffs.len() != 2 * n {
                    return Err(bad("need 2N coefficients"));
                }
                let constant = params.get("constant").and_then(Value::as_f64).unwrap_or(0.0);
                TestFunction::Affine { coeffs, constant }
            }
            "quadratic" => {
                let rows: Vec<Vec<f64>> = serde_json::from_value(params.get("q").cloned().unwrap_or(Value::Null))
                    .map_err(|e| bad(&e.to_string()))?;
                TestFunction::Quadratic(QuadraticForm::new(n, rows)?)
            }
            other => return Err(ConvexityError::Unknown(other.into())),
        };
        Ok(f)
    }

    pub fn eval<S: Scalar>(&self, f: &Matrix<S>) -> S {
        let frob2 = || f.data().iter().fold(S::zero(), |acc, x| acc + x.clone() * x.clone());
        let minor = |a: usize, b: usize| {
            f.get(0, a).clone() * f.get(1, b).clone() - f.get(0, b).clone() * f.get(1, a).clone()
        };
        match self {
            TestFunction::FrobeniusPower(p) => {
                let sq = frob2();
                if p % 2 == 0 {
                    (0..p / 2).fold(S::one(), |acc, _| acc * sq.clone())
                } else {
                    S::from_f64_lossy(sq.to_f64().sqrt().powi(*p as i32))
                }
            }
            TestFunction::NegFrobeniusSquared => -frob2(),
            TestFunction::Minor(a, b) => minor(*a, *b),
            TestFunction::NegMinor(a, b) => -minor(*a, *b),
            TestFunction::Quadratic(q) => q.eval(f),
            TestFunction::Affine { coeffs, constant } => f
                .data()
                .iter()
                .zip(coeffs)
                .fold(S::from_f64_lossy(*constant), |acc, (x, c)| acc + S::from_f64_lossy(*c) * x.clone()),
            TestFunction::Polyconvex => {
                let d = minor(0, 1);
                frob2() + d.clone() * d
            }
            TestFunction::Combination(terms) => terms
                .iter()
                .fold(S::zero(), |acc, (c, g)| acc + S::from_f64_lossy(*c) * g.eval(f)),
        }
    }
}

/// `sum_i w_i psi(F_i) - psi(sum_i w_i F_i)` for a weighted atom list.
pub fn jensen_gap_atoms<S: Scalar>(psi: &TestFunction, atoms: &[(Matrix<S>, S)]) -> S {
    let Some((first, _)) = atoms.first() else {
        return S::zero();
    };
    let mut bar = Matrix::zeros(first.rows(), first.cols());
    let mut avg = S::zero();
    for (f, w) in atoms {
        bar = bar.add(&f.scale(w));
        avg = avg + w.clone() * psi.eval(f);
    }
    avg - psi.eval(&bar)
}

pub fn jensen_gap<S: Scalar>(psi: &TestFunction, measure: &GradientMeasure<S>) -> S {
    let atoms: Vec<(Matrix<S>, S)> = measure.atoms.iter().map(|a| (a.matrix(), a.weight.clone())).collect();
    jensen_gap_atoms(psi, &atoms)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeReport {
    pub segments: usize,
    pub violations: usize,
    /// Most negative normalized second difference (0 when none is negative).
    pub worst: f64,
    /// Largest normalized second difference in absolute value.
    pub max_abs: f64,
}

/// Samples rank-one lines `F + s a (x) n` and tests convexity along each
/// through centered second differences at two step sizes.
pub fn rank_one_convexity_probe(psi: &TestFunction, n: usize, samples: usize, seed: u64) -> ProbeReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = ProbeReport { segments: samples, violations: 0, worst: 0.0, max_abs: 0.0 };
    for _ in 0..samples {
        let f: Vec<f64> = (0..2 * n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let a = unit(&mut rng, 2);
        let nn = unit(&mut rng, n);
        let dir: Vec<f64> = a.iter().flat_map(|ar| nn.iter().map(move |c| ar * c)).collect();
        let at = |s: f64| {
            let v: Vec<f64> = f.iter().zip(&dir).map(|(x, d)| x + s * d).collect();
            psi.eval(&Matrix::from_vec(2, n, v))
        };
        let base = at(0.0);
        let mut violated = false;
        for h in [0.5, 0.05] {
            let d2 = (at(h) - 2.0 * base + at(-h)) / (h * h);
            let tol = 1e-7 * (1.0 + base.abs()) / (h * h).max(1e-3);
            report.max_abs = report.max_abs.max(d2.abs());
            if d2 < -tol {
                violated = true;
                report.worst = report.worst.min(d2);
            }
        }
        if violated {
            report.violations += 1;
        }
    }
    report
}

fn unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-3 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Random symmetric form with entries in `[-1, 1]`.
pub fn random_quadratic(n: usize, rng: &mut ChaCha8Rng) -> QuadraticForm {
    let d = 2 * n;
    let mut q = vec![vec![0.0; d]; d];
    for i in 0..d {
        for j in i..d {
            let v = rng.gen_range(-1.0..1.0);
            q[i][j] = v;
            q[j][i] = v;
        }
    }
    QuadraticForm { n, q }
}

/// Quadratics admitted by [`quadratic_rank_one_test`]: random forms shifted
/// by random minors and a multiple of `|F|^2`, many of them not convex.
pub fn admissible_quadratics(n: usize, count: usize, seed: u64) -> Vec<QuadraticForm> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let mut q = random_quadratic(n, &mut rng).add(&QuadraticForm::frobenius(n), rng.gen_range(0.0..2.5));
        for a in 0..n {
            for b in (a + 1)..n {
                q = q.add(&QuadraticForm::minor(n, a, b, 1.0), rng.gen_range(-3.0..3.0));
            }
        }
        if quadratic_rank_one_test(&q) {
            out.push(q);
        }
    }
    out
}
