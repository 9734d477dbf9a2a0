//! Brute-force reference computations and randomized agreement suites.
//!
//! Every oracle here evaluates the objective from its definition on a grid
//! or by enumeration and shares no code path with the closed forms it
//! checks, except that the multi-class and duality suites score candidate
//! actions with [`primal_tv_oracle`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::classifier::{robust_batch_gradient, Architecture, SoftmaxModel};
use crate::error::Result;
use crate::optimal_action::{binary_optimal_action_with, multiclass_optimal_action};
use crate::types::{CategoricalDist, LossTransform, RobustLossSpec, Transform};
use crate::wasserstein_dual::{closed_form_empirical_risk, per_point_dual_min, primal_tv_oracle};

/// Outcome of one randomized suite.
#[derive(Debug, Clone, Serialize)]
pub struct SuiteReport {
    pub name: String,
    pub cases: usize,
    pub failures: usize,
    pub max_error: f64,
    pub tolerance: f64,
    pub first_failure: Option<String>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.cases > 0 && self.failures == 0
    }

    fn collect(name: &str, tolerance: f64, outcomes: Vec<Result<(f64, Option<String>)>>) -> Result<Self> {
        let mut report = SuiteReport {
            name: name.to_string(),
            cases: outcomes.len(),
            failures: 0,
            max_error: 0.0,
            tolerance,
            first_failure: None,
        };
        for o in outcomes {
            let (err, failure) = o?;
            report.max_error = report.max_error.max(err);
            if let Some(msg) = failure {
                report.failures += 1;
                report.first_failure.get_or_insert(msg);
            }
        }
        Ok(report)
    }
}

fn case_rng(seed: u64, case: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(case as u64 + 1);
    rng
}

fn random_dist<R: Rng>(rng: &mut R, k: usize) -> CategoricalDist {
    // Squared uniforms give a mix of peaked and flat vectors.
    let w: Vec<f64> = (0..k).map(|_| rng.random::<f64>().powi(2) + 1e-6).collect();
    CategoricalDist::from_weights(&w).expect("positive weights")
}

fn random_transform<R: Rng>(rng: &mut R) -> Transform {
    if rng.random_bool(0.5) {
        Transform::Linear
    } else {
        Transform::ClippedNegLog
    }
}

/// Binary dual objective at a fixed action `psi` (probability of class 1)
/// and multiplier: `gamma kappa_p rho + sum_j P_j max(T(psi_j), T(psi_{1-j}) - gamma kappa_p)`.
pub fn binary_objective<T: LossTransform + ?Sized>(
    transform: &T,
    rho: f64,
    kappa_p: f64,
    posterior: &CategoricalDist,
    psi: f64,
    gamma: f64,
) -> f64 {
    let l = [transform.value(1.0 - psi), transform.value(psi)];
    binary_objective_from_losses(l, rho, kappa_p, [posterior.get(0), posterior.get(1)], gamma)
}

fn binary_objective_from_losses(l: [f64; 2], rho: f64, kappa_p: f64, p: [f64; 2], gamma: f64) -> f64 {
    let pen = gamma * kappa_p;
    gamma * kappa_p * rho + p[0] * l[0].max(l[1] - pen) + p[1] * l[1].max(l[0] - pen)
}

/// Minimum of the binary objective over `psi` in `[0, 1]` (step `psi_step`)
/// and `gamma` in `[0, (T(0) - T(1)) / kappa_p]` (`gamma_points` values).
/// Returns `(value, psi, gamma)`.
pub fn binary_grid_min<T: LossTransform + ?Sized + Sync>(
    transform: &T,
    rho: f64,
    kappa_p: f64,
    posterior: &CategoricalDist,
    psi_step: f64,
    gamma_points: usize,
) -> (f64, f64, f64) {
    let p = [posterior.get(0), posterior.get(1)];
    let g_max = (transform.value(0.0) - transform.value(1.0)) / kappa_p;
    let psi_points = (1.0 / psi_step).round() as usize;
    let mut best = (f64::INFINITY, 0.0, 0.0);
    for a in 0..=psi_points {
        let psi = a as f64 / psi_points as f64;
        let l = [transform.value(1.0 - psi), transform.value(psi)];
        for b in 0..=gamma_points {
            let gamma = g_max * b as f64 / gamma_points as f64;
            let v = binary_objective_from_losses(l, rho, kappa_p, p, gamma);
            if v < best.0 {
                best = (v, psi, gamma);
            }
        }
    }
    best
}

/// Exhaustive minimum over the extreme actions "uniform over a subset of
/// classes", scored by the worst case over the total-variation ball.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExtremePointResult {
    pub value: f64,
    /// Bitmask of the best support.
    pub support: u32,
    pub k0: usize,
    /// Gap to the best action with a different support.
    pub margin: f64,
}

pub fn multiclass_extreme_point_min(spec: &RobustLossSpec, posterior: &CategoricalDist) -> Result<ExtremePointResult> {
    let k = posterior.k();
    let mut scored = Vec::with_capacity((1usize << k) - 1);
    for mask in 1u32..(1u32 << k) {
        let size = mask.count_ones() as usize;
        let psi: Vec<f64> = (0..k)
            .map(|j| if mask >> j & 1 == 1 { 1.0 / size as f64 } else { 0.0 })
            .collect();
        let pred = CategoricalDist::from_weights(&psi)?;
        scored.push((primal_tv_oracle(spec, &pred, posterior)?, mask));
    }
    scored.sort_by(|a, b| a.0.total_cmp(&b.0));
    let (value, support) = scored[0];
    let margin = scored.get(1).map_or(f64::INFINITY, |s| s.0 - value);
    Ok(ExtremePointResult {
        value,
        support,
        k0: support.count_ones() as usize,
        margin,
    })
}

/// Scans the empirical dual objective over `gamma` in `[0, gamma_max]` with
/// the given step. Returns `(argmin, min)`, the smallest argmin on ties.
pub fn empirical_gamma_scan(
    spec: &RobustLossSpec,
    preds: &[CategoricalDist],
    posteriors: &[CategoricalDist],
    gamma_max: f64,
    step: f64,
) -> (f64, f64) {
    let n = preds.len() as f64;
    let kp = spec.kappa_p();
    let eps_p = spec.epsilon_p();
    // (loss, max loss of the row, weight)
    let mut terms = Vec::new();
    for (pred, post) in preds.iter().zip(posteriors) {
        let l = spec.loss_vector(pred);
        let top = l.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        for (j, lj) in l.iter().enumerate() {
            terms.push((*lj, top, post.get(j) / n));
        }
    }
    let steps = (gamma_max / step).ceil() as usize;
    let mut best = (0.0, f64::INFINITY);
    for s in 0..=steps {
        let gamma = s as f64 * step;
        let pen = gamma * kp;
        let v = gamma * eps_p + terms.iter().map(|(l, top, w)| w * l.max(top - pen)).sum::<f64>();
        if v < best.1 {
            best = (gamma, v);
        }
    }
    best
}

/// Central differences of the robust batch loss in every parameter.
pub fn finite_difference_gradient(
    model: &SoftmaxModel,
    xs: &[&[f64]],
    refs: &[CategoricalDist],
    spec: &RobustLossSpec,
    gamma: f64,
    h: f64,
) -> Result<Vec<f64>> {
    let mut probe = model.clone();
    let mut out = Vec::with_capacity(model.params().len());
    for i in 0..model.params().len() {
        let base = probe.params()[i];
        probe.params_mut()[i] = base + h;
        let up = robust_batch_gradient(&probe, xs, refs, spec, gamma)?.0;
        probe.params_mut()[i] = base - h;
        let down = robust_batch_gradient(&probe, xs, refs, spec, gamma)?.0;
        probe.params_mut()[i] = base;
        out.push((up - down) / (2.0 * h));
    }
    Ok(out)
}

/// Largest absolute difference scaled by the largest magnitude in either
/// vector.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let scale = a.iter().chain(b).map(|x| x.abs()).fold(1e-12, f64::max);
    diff / scale
}

/// Per-point strong duality: dual minimum against the primal worst case.
pub fn duality_suite(seed: u64, cases: usize) -> Result<SuiteReport> {
    let tol = 1e-8;
    let outcomes = (0..cases)
        .into_par_iter()
        .map(|c| {
            let mut rng = case_rng(seed, c);
            let k = rng.random_range(2..=6);
            let kappa = rng.random_range(0.5..2.0);
            // Radii past 1 exercise the whole-simplex case.
            let eps = kappa * rng.random_range(0.005..1.2);
            let spec = RobustLossSpec::new(random_transform(&mut rng), 1.0, kappa, eps)?;
            let pred = random_dist(&mut rng, k);
            let post = random_dist(&mut rng, k);
            let dual = per_point_dual_min(&spec, &pred, &post)?.value;
            let primal = primal_tv_oracle(&spec, &pred, &post)?;
            let err = (dual - primal).abs();
            let fail = (err > tol).then(|| format!("case {c}: dual {dual} primal {primal}"));
            Ok((err, fail))
        })
        .collect();
    SuiteReport::collect("duality", tol, outcomes)
}

/// Draws a binary posterior; for the convex transform half the draws land
/// in the interior-root band `rho + 1/2 < P_j < rho + varpi2`.
fn binary_case(rng: &mut ChaCha8Rng, transform: Transform) -> Result<(f64, f64, CategoricalDist)> {
    let kappa_p: f64 = rng.random_range(0.5..2.0);
    let rho: f64 = rng.random_range(0.01..0.45);
    let p_major = if transform == Transform::ClippedNegLog && rng.random_bool(0.5) {
        let hi = (rho + 0.99).min(1.0);
        let lo = rho + 0.5;
        if lo < hi { rng.random_range(lo..hi) } else { rng.random::<f64>() }
    } else {
        rng.random::<f64>()
    };
    let post = if rng.random_bool(0.5) {
        CategoricalDist::from_weights(&[p_major, 1.0 - p_major])?
    } else {
        CategoricalDist::from_weights(&[1.0 - p_major, p_major])?
    };
    Ok((rho, kappa_p, post))
}

/// Binary closed form against the `(psi, gamma)` grid.
pub fn binary_action_suite(seed: u64, cases_per_transform: usize) -> Result<SuiteReport> {
    let tol = 1e-3;
    let outcomes = (0..2 * cases_per_transform)
        .into_par_iter()
        .map(|c| {
            let transform = if c < cases_per_transform {
                Transform::Linear
            } else {
                Transform::ClippedNegLog
            };
            let mut rng = case_rng(seed, c);
            let (rho, kappa_p, post) = binary_case(&mut rng, transform)?;
            let action = binary_optimal_action_with(&transform, rho, kappa_p, &post)?;
            let closed = binary_objective(&transform, rho, kappa_p, &post, action.psi_star, action.gamma_star);
            let (grid, gpsi, ggamma) = binary_grid_min(&transform, rho, kappa_p, &post, 1e-3, 2000);
            let err = (closed - grid).max(0.0);
            let fail = (closed > grid + tol).then(|| {
                format!(
                    "case {c} {transform:?} P={:?} rho={rho}: closed {closed} at ({}, {}) vs grid {grid} at ({gpsi}, {ggamma})",
                    post.probs(),
                    action.psi_star,
                    action.gamma_star
                )
            });
            Ok((err, fail))
        })
        .collect();
    SuiteReport::collect("binary optimal action", tol, outcomes)
}

/// Multi-class closed form against subset enumeration.
pub fn multiclass_action_suite(seed: u64, cases: usize) -> Result<SuiteReport> {
    let tol = 1e-9;
    let outcomes = (0..cases)
        .into_par_iter()
        .map(|c| {
            let mut rng = case_rng(seed, c);
            let k = rng.random_range(2..=6);
            let eps = rng.random_range(0.005..0.6);
            let spec = RobustLossSpec::new(Transform::Linear, 1.0, 1.0, eps)?;
            let post = random_dist(&mut rng, k);
            let action = multiclass_optimal_action(&spec, &post)?;
            let closed = primal_tv_oracle(&spec, &action.psi_star, &post)?;
            let brute = multiclass_extreme_point_min(&spec, &post)?;
            let err = (closed - brute.value).abs();
            let support: u32 = (0..k)
                .filter(|&j| action.psi_star.get(j) > 0.0)
                .fold(0, |m, j| m | 1 << j);
            let mut fail = None;
            if err > tol {
                fail = Some(format!("case {c}: closed {closed} brute {}", brute.value));
            } else if brute.margin > 1e-6 && support != brute.support {
                fail = Some(format!(
                    "case {c}: k0 {} vs brute {} (margin {})",
                    action.k0, brute.k0, brute.margin
                ));
            }
            Ok((err, fail))
        })
        .collect();
    SuiteReport::collect("multi-class optimal action", tol, outcomes)
}

/// The two-point batch used as a hand-checkable reference.
pub fn worked_example() -> Result<(RobustLossSpec, Vec<CategoricalDist>, Vec<CategoricalDist>)> {
    let spec = RobustLossSpec::new(Transform::Linear, 1.0, 1.0, 0.4)?;
    let preds = vec![
        CategoricalDist::new(vec![0.9, 0.1])?,
        CategoricalDist::new(vec![0.6, 0.4])?,
    ];
    let posts = vec![
        CategoricalDist::new(vec![0.7, 0.3])?,
        CategoricalDist::new(vec![0.5, 0.5])?,
    ];
    Ok((spec, preds, posts))
}

/// Closed-form multiplier and risk against a fine `gamma` scan.
pub fn closed_form_suite(seed: u64, cases: usize) -> Result<SuiteReport> {
    let tol = 1e-4;
    let step = 1e-5;
    let mut outcomes: Vec<Result<(f64, Option<String>)>> = (0..cases)
        .into_par_iter()
        .map(|c| {
            let mut rng = case_rng(seed, c);
            let n = rng.random_range(1..=20);
            let k = rng.random_range(2..=5);
            let kappa = rng.random_range(1.0..2.0);
            let eps = kappa * rng.random_range(0.01..(1.0 / k as f64));
            let spec = RobustLossSpec::new(random_transform(&mut rng), 1.0, kappa, eps)?;
            let preds: Vec<_> = (0..n).map(|_| random_dist(&mut rng, k)).collect();
            let posts: Vec<_> = (0..n).map(|_| random_dist(&mut rng, k)).collect();
            Ok(compare_closed_form(&spec, &preds, &posts, step, tol, &format!("case {c}")))
        })
        .collect();
    let (spec, preds, posts) = worked_example()?;
    outcomes.push(Ok(compare_closed_form(&spec, &preds, &posts, step, tol, "worked example")));
    SuiteReport::collect("closed-form empirical risk", tol, outcomes)
}

fn compare_closed_form(
    spec: &RobustLossSpec,
    preds: &[CategoricalDist],
    posts: &[CategoricalDist],
    step: f64,
    tol: f64,
    label: &str,
) -> (f64, Option<String>) {
    let closed = match closed_form_empirical_risk(spec, preds, posts) {
        Ok(c) => c,
        Err(e) => return (f64::INFINITY, Some(format!("{label}: {e}"))),
    };
    let top = closed.alpha_sorted.first().copied().unwrap_or(0.0) / spec.kappa_p();
    let (g, v) = empirical_gamma_scan(spec, preds, posts, top + 10.0 * step, step);
    let err = (closed.gamma_star - g).abs().max((closed.robust_risk - v).abs());
    let fail = (err > tol).then(|| {
        format!(
            "{label}: closed (gamma {}, risk {}) vs scan (gamma {g}, risk {v})",
            closed.gamma_star, closed.robust_risk
        )
    });
    (err, fail)
}

/// Analytic robust-loss gradients against central differences, skipping
/// draws that sit within a small margin of an inner-argmax tie or a clip
/// boundary, where the loss is not differentiable.
pub fn gradient_suite(seed: u64, cases: usize) -> Result<SuiteReport> {
    let tol = 1e-4;
    let h = 1e-5;
    let outcomes = (0..cases)
        .into_par_iter()
        .map(|c| {
            let mut rng = case_rng(seed, c);
            loop {
                let arch = if rng.random_bool(0.5) {
                    Architecture::Linear
                } else {
                    Architecture::Mlp { hidden: rng.random_range(2..=8) }
                };
                let d = rng.random_range(2..=5);
                let k = rng.random_range(2..=5);
                let n = rng.random_range(1..=8);
                let eps = rng.random_range(0.01..(1.0 / k as f64));
                let spec = RobustLossSpec::new(random_transform(&mut rng), 1.0, 1.0, eps)?;
                let gamma = rng.random_range(0.0..3.0);
                let model = SoftmaxModel::init(arch, d, k, &mut rng);
                let xs: Vec<Vec<f64>> = (0..n)
                    .map(|_| (0..d).map(|_| rng.random_range(-2.0..2.0)).collect())
                    .collect();
                let rows: Vec<&[f64]> = xs.iter().map(Vec::as_slice).collect();
                let refs: Vec<_> = (0..n).map(|_| random_dist(&mut rng, k)).collect();
                if near_kink(&model, &rows, &spec, gamma)? {
                    continue;
                }
                let (_, analytic) = robust_batch_gradient(&model, &rows, &refs, &spec, gamma)?;
                let numeric = finite_difference_gradient(&model, &rows, &refs, &spec, gamma, h)?;
                let err = relative_error(&analytic, &numeric);
                let fail = (err > tol).then(|| format!("case {c}: relative error {err}"));
                return Ok((err, fail));
            }
        })
        .collect();
    SuiteReport::collect("robust gradient", tol, outcomes)
}

fn near_kink(model: &SoftmaxModel, rows: &[&[f64]], spec: &RobustLossSpec, gamma: f64) -> Result<bool> {
    const MARGIN: f64 = 1e-3;
    for x in rows {
        let pred = model.predict(x)?;
        if spec.transform == Transform::ClippedNegLog
            && pred.probs().iter().any(|p| (p - 0.01).abs() < MARGIN || (p - 0.99).abs() < MARGIN)
        {
            return Ok(true);
        }
        let losses = spec.loss_vector(&pred);
        for j in 0..losses.len() {
            let mut v: Vec<f64> = losses
                .iter()
                .enumerate()
                .map(|(y, l)| if y == j { *l } else { l - gamma * spec.kappa_p() })
                .collect();
            v.sort_by(|a, b| b.total_cmp(a));
            if v[0] - v[1] < MARGIN {
                return Ok(true);
            }
        }
    }
    Ok(false)
}
