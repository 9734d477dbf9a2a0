//! Closed-form per-point optimal predictions for the relaxed dual risk.
//!
//! Binary case: the optimum depends on whether `T` is concave (hard 0/1 or
//! 1/2) or convex (hard, an interior root, or 1/2). Multi-class case with
//! `T(t) = 1 - t`: the optimum spreads mass uniformly over the `k0` most
//! probable classes.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::types::{CategoricalDist, Curvature, LossTransform, RobustLossSpec, Transform};

const BISECTION_TOL: f64 = 1e-10;
const BRACKET_MARGIN: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum BinaryCase {
    AssignZero,
    AssignOne,
    Half,
    /// Interior optimum in `(0, 1/2)`.
    InteriorT0,
    /// Interior optimum in `(1/2, 1)`.
    InteriorT1,
}

/// `psi_star` is the optimal probability assigned to class 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BinaryActionResult {
    pub psi_star: f64,
    pub case_tag: BinaryCase,
    pub gamma_star: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MultiClassActionResult {
    pub psi_star: CategoricalDist,
    /// Number of classes sharing the mass.
    pub k0: usize,
    /// Class indices in decreasing posterior order.
    pub permutation: Vec<usize>,
}

/// `(T(0) - T(1/2)) / (T(0) - T(1))` for a concave transform.
pub fn varpi1<T: LossTransform + ?Sized>(transform: &T) -> Result<f64> {
    if transform.curvature() == Curvature::Convex {
        return Err(Error::UnsupportedTransform("varpi1 requires a concave transform"));
    }
    let span = transform.value(0.0) - transform.value(1.0);
    if !(span > 0.0) {
        return Err(Error::UnsupportedTransform("transform must be strictly decreasing"));
    }
    Ok((transform.value(0.0) - transform.value(0.5)) / span)
}

/// `T'(0) / (T'(0) + T'(1))` for a convex transform; must land in `[1/2, 1)`.
pub fn varpi2<T: LossTransform + ?Sized>(transform: &T) -> Result<f64> {
    if transform.curvature() == Curvature::Concave {
        return Err(Error::UnsupportedTransform("varpi2 requires a convex transform"));
    }
    let d0 = transform.derivative(0.0);
    let d1 = transform.derivative(1.0);
    if !(d0 < 0.0 && d1 < 0.0) {
        return Err(Error::UnsupportedTransform(
            "varpi2 needs T'(0) < 0 and T'(1) < 0",
        ));
    }
    let w = d0 / (d0 + d1);
    if !(0.5..1.0).contains(&w) {
        return Err(Error::UnsupportedTransform("varpi2 must lie in [1/2, 1)"));
    }
    Ok(w)
}

/// Binary optimal action using the transform of `spec`.
pub fn binary_optimal_action(
    spec: &RobustLossSpec,
    posterior: &CategoricalDist,
) -> Result<BinaryActionResult> {
    binary_optimal_action_with(&spec.transform, spec.rho(), spec.kappa_p(), posterior)
}

/// Binary optimal action for an arbitrary concave or convex transform, with
/// radius `rho = eps^p / kappa^p` and cost scale `kappa_p = kappa^p`.
pub fn binary_optimal_action_with<T: LossTransform + ?Sized>(
    transform: &T,
    rho: f64,
    kappa_p: f64,
    posterior: &CategoricalDist,
) -> Result<BinaryActionResult> {
    if posterior.k() != 2 {
        return Err(Error::DimensionMismatch {
            expected: 2,
            actual: posterior.k(),
        });
    }
    let (p0, p1) = (posterior.get(0), posterior.get(1));
    let hard_gamma = (transform.value(0.0) - transform.value(1.0)) / kappa_p;
    let assign = |case_tag| BinaryActionResult {
        psi_star: if case_tag == BinaryCase::AssignZero { 0.0 } else { 1.0 },
        case_tag,
        gamma_star: hard_gamma,
    };
    let half = BinaryActionResult {
        psi_star: 0.5,
        case_tag: BinaryCase::Half,
        gamma_star: 0.0,
    };

    match transform.curvature() {
        Curvature::Concave | Curvature::Linear => {
            let cut = rho + varpi1(transform)?;
            // An exact 1/2 tie returns 1/2 for symmetry, even where a hard
            // action would score the same or lower.
            if p0 == p1 {
                return Ok(half);
            }
            let (first, second) = if p1 > p0 {
                ((p1, BinaryCase::AssignOne), (p0, BinaryCase::AssignZero))
            } else {
                ((p0, BinaryCase::AssignZero), (p1, BinaryCase::AssignOne))
            };
            if first.0 >= cut {
                Ok(assign(first.1))
            } else if second.0 >= cut {
                Ok(assign(second.1))
            } else {
                Ok(half)
            }
        }
        Curvature::Convex => {
            let w2 = varpi2(transform)?;
            if p0 >= rho + w2 {
                return Ok(assign(BinaryCase::AssignZero));
            }
            if p1 >= rho + w2 {
                return Ok(assign(BinaryCase::AssignOne));
            }
            if p0 > rho + 0.5 {
                let t = interior_root(transform, p0 - rho, p1 + rho);
                return Ok(BinaryActionResult {
                    psi_star: t,
                    case_tag: BinaryCase::InteriorT0,
                    gamma_star: (transform.value(t) - transform.value(1.0 - t)) / kappa_p,
                });
            }
            if p1 > rho + 0.5 {
                let t = 1.0 - interior_root(transform, p1 - rho, p0 + rho);
                return Ok(BinaryActionResult {
                    psi_star: t,
                    case_tag: BinaryCase::InteriorT1,
                    gamma_star: (transform.value(1.0 - t) - transform.value(t)) / kappa_p,
                });
            }
            Ok(half)
        }
    }
}

/// Root in `(0, 1/2)` of `minor * T'(t) - major * T'(1 - t)`, which is
/// negative near 0 and positive near 1/2 in the interior regime.
fn interior_root<T: LossTransform + ?Sized>(transform: &T, major: f64, minor: f64) -> f64 {
    let f = |t: f64| minor * transform.derivative(t) - major * transform.derivative(1.0 - t);
    let mut lo = BRACKET_MARGIN;
    let mut hi = 0.5 - BRACKET_MARGIN;
    while hi - lo > BISECTION_TOL {
        let mid = 0.5 * (lo + hi);
        if f(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Multi-class optimal action for the linear transform.
pub fn multiclass_optimal_action(
    spec: &RobustLossSpec,
    posterior: &CategoricalDist,
) -> Result<MultiClassActionResult> {
    if spec.transform != Transform::Linear {
        return Err(Error::UnsupportedTransform(
            "multi-class closed form is derived for the linear transform",
        ));
    }
    multiclass_action_for_rho(spec.rho(), posterior)
}

pub(crate) fn multiclass_action_for_rho(
    rho: f64,
    posterior: &CategoricalDist,
) -> Result<MultiClassActionResult> {
    let k = posterior.k();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|a, b| posterior.get(*b).total_cmp(&posterior.get(*a)).then(a.cmp(b)));

    let mut best_k = k;
    let mut best_score = f64::NEG_INFINITY;
    let mut cum = 0.0;
    for (idx, &cls) in order.iter().take(k - 1).enumerate() {
        cum += posterior.get(cls);
        let size = (idx + 1) as f64;
        let score = (cum - rho) / size;
        if score > best_score {
            best_score = score;
            best_k = idx + 1;
        }
    }
    if best_score <= 1.0 / k as f64 {
        best_k = k;
    }
    let mut psi = vec![0.0; k];
    for &cls in order.iter().take(best_k) {
        psi[cls] = 1.0 / best_k as f64;
    }
    Ok(MultiClassActionResult {
        psi_star: CategoricalDist::from_weights(&psi)?,
        k0: best_k,
        permutation: order,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    struct SqrtComplement;
    impl LossTransform for SqrtComplement {
        fn value(&self, t: f64) -> f64 {
            (1.0 - t).max(0.0).sqrt()
        }
        fn derivative(&self, t: f64) -> f64 {
            -0.5 / (1.0 - t).max(1e-300).sqrt()
        }
        fn curvature(&self) -> Curvature {
            Curvature::Concave
        }
    }

    struct SquaredComplement;
    impl LossTransform for SquaredComplement {
        fn value(&self, t: f64) -> f64 {
            (1.0 - t).powi(2)
        }
        fn derivative(&self, t: f64) -> f64 {
            -2.0 * (1.0 - t)
        }
        fn curvature(&self) -> Curvature {
            Curvature::Convex
        }
    }

    fn dist(v: &[f64]) -> CategoricalDist {
        CategoricalDist::new(v.to_vec()).unwrap()
    }

    fn spec(t: Transform, eps: f64) -> RobustLossSpec {
        RobustLossSpec::new(t, 1.0, 1.0, eps).unwrap()
    }

    #[test]
    fn varpi_examples() {
        assert!((varpi1(&Transform::Linear).unwrap() - 0.5).abs() < 1e-15);
        let w = varpi1(&SqrtComplement).unwrap();
        assert!((w - (1.0 - 0.5f64.sqrt())).abs() < 1e-12);
        assert!((w - 0.2929).abs() < 1e-4);
        assert!(varpi1(&Transform::ClippedNegLog).is_err());

        assert!((varpi2(&Transform::Linear).unwrap() - 0.5).abs() < 1e-15);
        let w2 = varpi2(&Transform::ClippedNegLog).unwrap();
        assert!((w2 - 100.0 / (100.0 + 1.0 / 0.99)).abs() < 1e-12);
        assert!((w2 - 0.9900).abs() < 1e-4);
        assert!(varpi2(&SquaredComplement).is_err());
        assert!(varpi2(&SqrtComplement).is_err());
    }

    #[test]
    fn binary_examples() {
        let s = spec(Transform::Linear, 0.1);
        let r = binary_optimal_action(&s, &dist(&[0.65, 0.35])).unwrap();
        assert_eq!(r.case_tag, BinaryCase::AssignZero);
        assert_eq!(r.psi_star, 0.0);
        assert!((r.gamma_star - 1.0).abs() < 1e-15);

        let r = binary_optimal_action(&s, &dist(&[0.55, 0.45])).unwrap();
        assert_eq!(r.case_tag, BinaryCase::Half);
        assert_eq!(r.gamma_star, 0.0);

        for t in [Transform::Linear, Transform::ClippedNegLog] {
            for eps in [0.01, 0.2, 0.6] {
                let r = binary_optimal_action(&spec(t, eps), &dist(&[0.5, 0.5])).unwrap();
                assert_eq!(r.psi_star, 0.5);
            }
        }
        assert!(binary_optimal_action(&s, &dist(&[0.5, 0.3, 0.2])).is_err());
    }

    #[test]
    fn binary_convex_interior_solves_stationarity() {
        let s = spec(Transform::ClippedNegLog, 0.05);
        let post = dist(&[0.8, 0.2]);
        let r = binary_optimal_action(&s, &post).unwrap();
        assert_eq!(r.case_tag, BinaryCase::InteriorT0);
        assert!(r.psi_star > 0.0 && r.psi_star < 0.5);
        let t = Transform::ClippedNegLog;
        let lhs = (0.8 - 0.05) * t.derivative(1.0 - r.psi_star);
        let rhs = (0.2 + 0.05) * t.derivative(r.psi_star);
        assert!((lhs - rhs).abs() < 1e-6);

        let mirrored = binary_optimal_action(&s, &dist(&[0.2, 0.8])).unwrap();
        assert_eq!(mirrored.case_tag, BinaryCase::InteriorT1);
        assert!((mirrored.psi_star - (1.0 - r.psi_star)).abs() < 1e-9);
        assert!((mirrored.gamma_star - r.gamma_star).abs() < 1e-9);
    }

    #[test]
    fn concave_small_threshold_tie_is_half() {
        // rho + varpi1 < 1/2, so both hard conditions hold at the tie.
        let r = binary_optimal_action_with(&SqrtComplement, 0.1, 1.0, &dist(&[0.5, 0.5])).unwrap();
        assert_eq!(r.case_tag, BinaryCase::Half);
        let r = binary_optimal_action_with(&SqrtComplement, 0.1, 1.0, &dist(&[0.55, 0.45])).unwrap();
        assert_eq!(r.case_tag, BinaryCase::AssignZero);
        let r = binary_optimal_action_with(&SqrtComplement, 0.1, 1.0, &dist(&[0.45, 0.55])).unwrap();
        assert_eq!(r.case_tag, BinaryCase::AssignOne);
    }

    #[test]
    fn multiclass_examples() {
        let s = spec(Transform::Linear, 0.05);
        let r = multiclass_optimal_action(&s, &dist(&[0.5, 0.3, 0.2])).unwrap();
        assert_eq!(r.k0, 1);
        assert_eq!(r.psi_star.probs(), &[1.0, 0.0, 0.0]);

        let s = spec(Transform::Linear, 0.1);
        let r = multiclass_optimal_action(&s, &dist(&[0.4, 0.35, 0.25])).unwrap();
        assert_eq!(r.k0, 3);
        for p in r.psi_star.probs() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }

        let r = multiclass_optimal_action(&s, &CategoricalDist::uniform(5)).unwrap();
        assert_eq!(r.k0, 5);
        assert!(multiclass_optimal_action(&spec(Transform::ClippedNegLog, 0.1), &CategoricalDist::uniform(3)).is_err());
    }

    #[test]
    fn multiclass_two_support() {
        // scores: k=1 -> 0.4-0.05 = 0.35, k=2 -> (0.8-0.05)/2 = 0.375 > 1/3
        let s = spec(Transform::Linear, 0.05);
        let r = multiclass_optimal_action(&s, &dist(&[0.4, 0.1, 0.4, 0.1])).unwrap();
        assert_eq!(r.k0, 2);
        assert_eq!(r.psi_star.probs(), &[0.5, 0.0, 0.5, 0.0]);
    }

    proptest::proptest! {
        #[test]
        fn multiclass_permutation_equivariant(
            w in proptest::collection::vec(0.01f64..1.0, 2..7),
            eps in 0.001f64..0.5,
            shift in 0usize..7,
        ) {
            let base = CategoricalDist::from_weights(&w).unwrap();
            let k = w.len();
            let perm: Vec<usize> = (0..k).map(|i| (i + shift) % k).collect();
            let permuted_w: Vec<f64> = perm.iter().map(|&i| w[i]).collect();
            let permuted = CategoricalDist::from_weights(&permuted_w).unwrap();
            let s = spec(Transform::Linear, eps);
            let a = multiclass_optimal_action(&s, &base).unwrap();
            let b = multiclass_optimal_action(&s, &permuted).unwrap();
            // Exact posterior ties can be split differently; skip them.
            let mut sorted = w.clone();
            sorted.sort_by(f64::total_cmp);
            let tied = sorted.windows(2).any(|p| (p[1] - p[0]).abs() < 1e-12);
            if !tied {
                for (i, &src) in perm.iter().enumerate() {
                    proptest::prop_assert_eq!(b.psi_star.get(i), a.psi_star.get(src));
                }
            }
        }

        #[test]
        fn binary_and_multiclass_agree_for_linear(p0 in 0.0f64..=1.0, eps in 0.001f64..0.6) {
            let post = CategoricalDist::new(vec![p0, 1.0 - p0]).unwrap();
            let s = spec(Transform::Linear, eps);
            let b = binary_optimal_action(&s, &post).unwrap();
            let m = multiclass_optimal_action(&s, &post).unwrap();
            // Boundary equality (P_j == rho + 1/2) is a tie between two optimal actions.
            if (p0.max(1.0 - p0) - (s.rho() + 0.5)).abs() > 1e-9 {
                proptest::prop_assert!((b.psi_star - m.psi_star.get(1)).abs() < 1e-12);
            }
        }
    }
}
