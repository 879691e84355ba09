//! End-to-end runs: instance generation, decomposition and oracle comparison.

use std::str::FromStr;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::fixedpoint::{find_fixed_point, verify_joint_laminate, Escalation, FixedPointConfig, FixedPointError, FixedPointReport};
use crate::geometry::Triangulation;
use crate::hn::{brute_force_laminate_search, same_measure, validate_certificate, DirectionSet, HnCertificate, HnError, RankOne};
use crate::linalg::Matrix;
use crate::pwa::{random_map, scaled_map, separable_map, GradientMeasure, PeriodicPwaMap, PwaError};
use crate::scalar::{convert, Rational, Scalar};
use crate::theta::{select_tuples, ThetaError, TupleSelection};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InstanceKind {
    /// Independent random integer components.
    Random,
    /// Second component equal to the first.
    Identical,
    /// Second component a random nonzero multiple of the first.
    Scaled,
    Zero,
    /// Per-axis zigzag sums with random coefficients.
    Separable,
}

impl FromStr for InstanceKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Ok(match s {
            "random" => InstanceKind::Random,
            "identical" => InstanceKind::Identical,
            "scaled" => InstanceKind::Scaled,
            "zero" => InstanceKind::Zero,
            "separable" => InstanceKind::Separable,
            other => return Err(format!("unknown instance kind `{other}`")),
        })
    }
}

impl InstanceKind {
    pub fn name(self) -> &'static str {
        match self {
            InstanceKind::Random => "random",
            InstanceKind::Identical => "identical",
            InstanceKind::Scaled => "scaled",
            InstanceKind::Zero => "zero",
            InstanceKind::Separable => "separable",
        }
    }
}

/// Seeded instance with integer nodal values in `[-amplitude, amplitude]`.
pub fn build_instance<S: Scalar>(
    tri: Arc<Triangulation>,
    kind: InstanceKind,
    amplitude: i64,
    seed: u64,
) -> Result<PeriodicPwaMap<S>, PwaError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let nonzero = |rng: &mut ChaCha8Rng| loop {
        let c = rng.gen_range(-amplitude.max(1)..=amplitude.max(1));
        if c != 0 {
            return c;
        }
    };
    Ok(match kind {
        InstanceKind::Random => random_map(tri, amplitude, seed),
        InstanceKind::Identical => scaled_map(tri, amplitude, 1, seed),
        InstanceKind::Scaled => {
            let c = nonzero(&mut rng);
            scaled_map(tri, amplitude, c, seed)
        }
        InstanceKind::Zero => PeriodicPwaMap::zero(tri),
        InstanceKind::Separable => {
            let dim = tri.dim();
            let a: Vec<i64> = (0..dim).map(|_| nonzero(&mut rng)).collect();
            let b: Vec<i64> = (0..dim).map(|_| nonzero(&mut rng)).collect();
            separable_map(tri, [&a, &b])?
        }
    })
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Theta(#[from] ThetaError),
    #[error(transparent)]
    FixedPoint(#[from] FixedPointError),
    #[error(transparent)]
    Hn(#[from] HnError),
    #[error(transparent)]
    Pwa(#[from] PwaError),
}

#[derive(Clone, Debug)]
pub struct Decomposition<S> {
    pub measure: GradientMeasure<S>,
    pub selection: TupleSelection<S>,
    pub report: FixedPointReport<S>,
    /// Present only when the search converged and the joint tree validated.
    pub certificate: Option<HnCertificate<S>>,
    /// Set when the search converged but the joint tree failed validation.
    pub verification_error: Option<String>,
}

/// extract -> select -> fixed point -> joint laminate check.
pub fn decompose<S: Scalar>(
    map: &PeriodicPwaMap<S>,
    depth: Option<usize>,
    cfg: &FixedPointConfig,
) -> Result<Decomposition<S>, PipelineError> {
    let tri = map.triangulation().clone();
    let measure = map.extract_measure();
    let selection = select_tuples(&measure, &tri, depth)?;
    let report = find_fixed_point(&selection, cfg, Some(Escalation { measure: &measure, tri: &tri }))?;
    let (mut certificate, mut verification_error) = (None, None);
    if let Some(t) = &report.t_star {
        match verify_joint_laminate(t, &report.selection, cfg) {
            Ok(c) => certificate = Some(c),
            Err(e) => verification_error = Some(e.to_string()),
        }
    }
    Ok(Decomposition { measure, selection, report, certificate, verification_error })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Comparison {
    pub seed: u64,
    pub support: usize,
    pub pipeline_outcome: String,
    pub pipeline_certificate: bool,
    pub oracle_certificate: bool,
    /// Both certificates exist, validate, and describe the same measure.
    pub agree: bool,
    pub note: String,
}

/// Runs the pipeline in `S` and the exact brute-force search on the same
/// seeded instance.
pub fn oracle_compare<S: Scalar>(
    tri: Arc<Triangulation>,
    kind: InstanceKind,
    amplitude: i64,
    seed: u64,
    depth: Option<usize>,
    cfg: &FixedPointConfig,
) -> Result<Comparison, PipelineError> {
    let exact = build_instance::<Rational>(tri.clone(), kind, amplitude, seed)?;
    let target = exact.extract_measure().merged(0.0);
    let support = target.len();
    let (oracle, oracle_error) =
        match brute_force_laminate_search(&target, crate::hn::ORACLE_MAX_DEPTH, &DirectionSet::AnyRankOne) {
            Ok(o) => (o, None),
            Err(e) => (None, Some(e.to_string())),
        };
    let oracle_ok = oracle.as_ref().is_some_and(|c| validate_certificate(c, &RankOne, 0.0).is_valid());

    let map = build_instance::<S>(tri, kind, amplitude, seed)?;
    let run = decompose(&map, depth, cfg)?;
    let pipeline_ok = run
        .certificate
        .as_ref()
        .is_some_and(|c| validate_certificate(c, &RankOne, cfg.tol_parallel).is_valid());

    let mut note = String::new();
    let agree = match (&run.certificate, &oracle) {
        (Some(p), Some(o)) if pipeline_ok && oracle_ok => {
            let tol = cfg.tol_membership;
            let mine: Vec<(Matrix<S>, S)> = p.tree.leaf_measure(tol);
            let theirs: Vec<(Matrix<S>, S)> =
                o.target.iter().map(|(m, w)| (convert_matrix(m), convert(w))).collect();
            let same = same_measure(&mine, &theirs, tol, tol);
            if !same {
                note = "certificates describe different measures".into();
            }
            same
        }
        _ => {
            note = match (&run.certificate, &oracle) {
                (None, _) => format!("pipeline {}", run.report.outcome.label()),
                (_, None) => oracle_error.unwrap_or_else(|| "oracle found no laminate".into()),
                _ => "a certificate failed validation".into(),
            };
            false
        }
    };
    Ok(Comparison {
        seed,
        support,
        pipeline_outcome: run.report.outcome.label().into(),
        pipeline_certificate: run.certificate.is_some(),
        oracle_certificate: oracle.is_some(),
        agree,
        note,
    })
}

fn convert_matrix<S: Scalar>(m: &Matrix<Rational>) -> Matrix<S> {
    Matrix::from_vec(m.rows(), m.cols(), m.data().iter().map(convert).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixedpoint::Outcome;
    use crate::geometry::build_unit_cube_triangulation;

    #[test]
    fn identical_instance_decomposes() {
        let tri = Arc::new(build_unit_cube_triangulation(2, 1).unwrap());
        let map = build_instance::<f64>(tri, InstanceKind::Identical, 3, 5).unwrap();
        let run = decompose(&map, None, &FixedPointConfig::default()).unwrap();
        assert_eq!(run.report.outcome, Outcome::Converged);
        assert!(run.certificate.is_some());
    }

    #[test]
    fn coarse_mesh_agrees_with_oracle() {
        let tri = Arc::new(build_unit_cube_triangulation(2, 0).unwrap());
        let c = oracle_compare::<Rational>(tri, InstanceKind::Random, 3, 1, None, &FixedPointConfig::default()).unwrap();
        assert!(c.agree, "{c:?}");
    }

    #[test]
    fn separable_instance_is_a_laminate() {
        let tri = Arc::new(build_unit_cube_triangulation(2, 1).unwrap());
        let map = build_instance::<Rational>(tri, InstanceKind::Separable, 3, 2).unwrap();
        let target = map.extract_measure().merged(0.0);
        assert_eq!(target.len(), 4);
        let cert = brute_force_laminate_search(&target, 4, &DirectionSet::AnyRankOne).unwrap().unwrap();
        assert!(validate_certificate(&cert, &RankOne, 0.0).is_valid());
    }
}
