//! Numeric backends.
//!
//! Every algorithm in the crate is written once against [`Scalar`] and runs
//! either in `f64` (with tolerances) or in [`Rational`] (exactly). On the exact
//! path all tolerance arguments are ignored and comparisons are exact.

use std::fmt::Debug;
use std::ops::{Add, Div, Mul, Neg, Sub};

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Signed, ToPrimitive, Zero};

pub type Rational = BigRational;

/// Builds the rational `num / den`.
pub fn rat(num: i64, den: i64) -> Rational {
    Rational::new(BigInt::from(num), BigInt::from(den))
}

pub trait Scalar:
    Clone
    + Debug
    + PartialEq
    + PartialOrd
    + Send
    + Sync
    + 'static
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + Zero
    + One
{
    /// True when arithmetic is exact.
    const EXACT: bool;

    fn from_rational(r: &Rational) -> Self;
    fn from_i64(v: i64) -> Self;
    fn to_f64(&self) -> f64;
    fn abs(&self) -> Self;

    /// `|self| <= tol` in floating point, `self == 0` when exact.
    fn is_negligible(&self, tol: f64) -> bool;

    /// Decimal string for f64 (shortest round-trip form), `p/q` for rationals.
    fn encode(&self) -> String;
    fn decode(s: &str) -> Option<Self>;

    /// Random value drawn from a small grid, used by restarts and generators.
    fn from_f64_lossy(v: f64) -> Self;

    fn two() -> Self {
        Self::one() + Self::one()
    }

    fn half() -> Self {
        Self::one() / Self::two()
    }

    fn pow2(exp: i32) -> Self {
        let mut out = Self::one();
        let base = if exp >= 0 { Self::two() } else { Self::half() };
        for _ in 0..exp.unsigned_abs() {
            out = out * base.clone();
        }
        out
    }

    /// `a <= b` up to tolerance (exact on the rational path).
    fn le_tol(a: &Self, b: &Self, tol: f64) -> bool {
        a <= b || (a.clone() - b.clone()).is_negligible(tol)
    }

    fn approx_eq(a: &Self, b: &Self, tol: f64) -> bool {
        (a.clone() - b.clone()).is_negligible(tol)
    }

    fn max_of(a: Self, b: Self) -> Self {
        if a >= b {
            a
        } else {
            b
        }
    }
}

impl Scalar for f64 {
    const EXACT: bool = false;

    fn from_rational(r: &Rational) -> Self {
        ToPrimitive::to_f64(r).unwrap_or(f64::NAN)
    }

    fn from_i64(v: i64) -> Self {
        v as f64
    }

    fn to_f64(&self) -> f64 {
        *self
    }

    fn abs(&self) -> Self {
        f64::abs(*self)
    }

    fn is_negligible(&self, tol: f64) -> bool {
        f64::abs(*self) <= tol
    }

    fn encode(&self) -> String {
        // `{:?}` always prints a round-trip representation, including `-0.0`.
        format!("{:?}", self)
    }

    fn decode(s: &str) -> Option<Self> {
        if let Ok(v) = s.parse::<f64>() {
            return Some(v);
        }
        parse_rational(s).and_then(|r| ToPrimitive::to_f64(&r))
    }

    fn from_f64_lossy(v: f64) -> Self {
        v
    }
}

impl Scalar for Rational {
    const EXACT: bool = true;

    fn from_rational(r: &Rational) -> Self {
        r.clone()
    }

    fn from_i64(v: i64) -> Self {
        Rational::from_integer(BigInt::from(v))
    }

    fn to_f64(&self) -> f64 {
        ToPrimitive::to_f64(self).unwrap_or(f64::NAN)
    }

    fn abs(&self) -> Self {
        Signed::abs(self)
    }

    fn is_negligible(&self, _tol: f64) -> bool {
        self.is_zero()
    }

    fn encode(&self) -> String {
        format!("{}/{}", self.numer(), self.denom())
    }

    fn decode(s: &str) -> Option<Self> {
        parse_rational(s)
    }

    fn from_f64_lossy(v: f64) -> Self {
        Rational::from_float(v).unwrap_or_else(Rational::zero)
    }
}

fn parse_rational(s: &str) -> Option<Rational> {
    let s = s.trim();
    match s.split_once('/') {
        Some((p, q)) => {
            let p: BigInt = p.trim().parse().ok()?;
            let q: BigInt = q.trim().parse().ok()?;
            if q.is_zero() {
                return None;
            }
            Some(Rational::new(p, q))
        }
        None => s.parse::<BigInt>().ok().map(Rational::from_integer),
    }
}

/// Converts a vector between scalar backends through the rational encoding.
pub fn convert_vec<A: Scalar, B: Scalar>(v: &[A]) -> Vec<B> {
    v.iter().map(convert).collect()
}

pub fn convert<A: Scalar, B: Scalar>(a: &A) -> B {
    if A::EXACT {
        B::decode(&a.encode()).expect("rational encoding always decodes")
    } else {
        B::from_f64_lossy(a.to_f64())
    }
}

pub fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    a.iter()
        .zip(b)
        .fold(S::zero(), |acc, (x, y)| acc + x.clone() * y.clone())
}

pub fn max_abs<S: Scalar>(v: &[S]) -> S {
    v.iter().fold(S::zero(), |acc, x| S::max_of(acc, x.abs()))
}

pub fn sub_vec<S: Scalar>(a: &[S], b: &[S]) -> Vec<S> {
    a.iter().zip(b).map(|(x, y)| x.clone() - y.clone()).collect()
}

pub fn add_vec<S: Scalar>(a: &[S], b: &[S]) -> Vec<S> {
    a.iter().zip(b).map(|(x, y)| x.clone() + y.clone()).collect()
}

pub fn scale_vec<S: Scalar>(c: &S, a: &[S]) -> Vec<S> {
    a.iter().map(|x| c.clone() * x.clone()).collect()
}

/// Scale-free parallelism test.
///
/// Exact path: all 2x2 minors vanish. Float path:
/// `|a||b| - |a.b| <= tol * max(1, |a||b|)` and every minor is below
/// `tol * max(1, |a||b|)`. The zero vector is parallel to everything.
pub fn parallel<S: Scalar>(a: &[S], b: &[S], tol: f64) -> bool {
    if S::EXACT {
        for p in 0..a.len() {
            for q in (p + 1)..a.len() {
                let minor = a[p].clone() * b[q].clone() - a[q].clone() * b[p].clone();
                if !minor.is_zero() {
                    return false;
                }
            }
        }
        return true;
    }
    let af: Vec<f64> = a.iter().map(Scalar::to_f64).collect();
    let bf: Vec<f64> = b.iter().map(Scalar::to_f64).collect();
    let na = af.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = bf.iter().map(|x| x * x).sum::<f64>().sqrt();
    let d: f64 = af.iter().zip(&bf).map(|(x, y)| x * y).sum();
    let scale = f64::max(1.0, na * nb);
    if na * nb - d.abs() > tol * scale {
        return false;
    }
    for p in 0..af.len() {
        for q in (p + 1)..af.len() {
            if (af[p] * bf[q] - af[q] * bf[p]).abs() > tol * scale {
                return false;
            }
        }
    }
    true
}
