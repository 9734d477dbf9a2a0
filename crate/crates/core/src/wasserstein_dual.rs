//! Dual form of the conditional Wasserstein robust risk under the scaled
//! discrete cost `c(y, y') = kappa * 1(y != y')`.
//!
//! Per point, the robust loss is
//!
//! ```text
//! inf_{gamma >= 0}  gamma * eps^p + sum_j P_j * max_{y'} { l(pred, y') - gamma * kappa^p * 1(y' != j) }
//! ```
//!
//! which is piecewise linear in `gamma` with breakpoints at loss gaps. Over a
//! batch, swapping the infimum and the empirical mean gives a single
//! `gamma` whose optimum has a closed form in terms of sorted loss gaps
//! (see [`closed_form_empirical_risk`]).

use serde::Serialize;

use crate::error::{Error, Result};
use crate::types::{CategoricalDist, LossTransform, RobustLossSpec};

/// Minimizer of the per-point dual objective.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PerPointDualResult {
    pub gamma_grid_argmin: f64,
    pub value: f64,
    /// For each reference label `j`, the maximizing `y'` at the optimum.
    pub worst_labels: Vec<usize>,
}

/// Closed-form empirical robust risk and the optimal multiplier.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClosedFormRiskResult {
    pub gamma_star: f64,
    /// 1-based threshold index in `[1, nK + 1]`.
    pub s_star: usize,
    pub robust_risk: f64,
    pub nominal_risk: f64,
    pub alpha_sorted: Vec<f64>,
    pub p_aligned: Vec<f64>,
}

fn check_gamma(gamma: f64) -> Result<()> {
    if gamma.is_nan() || gamma < 0.0 {
        Err(Error::NegativeGamma(gamma))
    } else {
        Ok(())
    }
}

/// Maximizer over `y'` of `losses[y'] - penalty * 1(y' != true_label)`;
/// ties go to the smallest class index.
pub(crate) fn inner_sup_from_losses(losses: &[f64], true_label: usize, penalty: f64) -> (f64, usize) {
    let mut best = f64::NEG_INFINITY;
    let mut arg = 0;
    for (y, l) in losses.iter().enumerate() {
        let v = if y == true_label { *l } else { l - penalty };
        if v > best {
            best = v;
            arg = y;
        }
    }
    (best, arg)
}

/// `max_{y'} { l(pred, y') - gamma * kappa^p * 1(y' != true_label) }` and a
/// maximizing `y'`.
pub fn dual_inner_sup(
    spec: &RobustLossSpec,
    pred: &CategoricalDist,
    true_label: usize,
    gamma: f64,
) -> Result<(f64, usize)> {
    check_gamma(gamma)?;
    if true_label >= pred.k() {
        return Err(Error::LabelOutOfRange {
            label: true_label,
            k: pred.k(),
        });
    }
    let losses = spec.loss_vector(pred);
    Ok(inner_sup_from_losses(&losses, true_label, gamma * spec.kappa_p()))
}

fn dual_value_from_losses(spec: &RobustLossSpec, losses: &[f64], posterior: &[f64], gamma: f64) -> f64 {
    let penalty = gamma * spec.kappa_p();
    let expected: f64 = posterior
        .iter()
        .enumerate()
        .map(|(j, pj)| pj * inner_sup_from_losses(losses, j, penalty).0)
        .sum();
    gamma * spec.epsilon_p() + expected
}

fn check_same_k(pred: &CategoricalDist, posterior: &CategoricalDist) -> Result<()> {
    if pred.k() != posterior.k() {
        return Err(Error::DimensionMismatch {
            expected: pred.k(),
            actual: posterior.k(),
        });
    }
    Ok(())
}

/// Per-point dual objective at a fixed multiplier.
pub fn per_point_dual_value(
    spec: &RobustLossSpec,
    pred: &CategoricalDist,
    posterior: &CategoricalDist,
    gamma: f64,
) -> Result<f64> {
    check_gamma(gamma)?;
    check_same_k(pred, posterior)?;
    let losses = spec.loss_vector(pred);
    Ok(dual_value_from_losses(spec, &losses, posterior.probs(), gamma))
}

/// Exact minimum of the per-point dual objective over `gamma >= 0`.
///
/// The objective is piecewise linear with kinks only at nonnegative loss
/// gaps `(l_a - l_b) / kappa^p`, so scanning `{0}` plus those gaps finds a
/// global minimizer. Among minimizers the smallest `gamma` is returned.
pub fn per_point_dual_min(
    spec: &RobustLossSpec,
    pred: &CategoricalDist,
    posterior: &CategoricalDist,
) -> Result<PerPointDualResult> {
    check_same_k(pred, posterior)?;
    let losses = spec.loss_vector(pred);
    let kp = spec.kappa_p();
    let mut candidates = vec![0.0];
    for a in &losses {
        for b in &losses {
            let g = (a - b) / kp;
            if g > 0.0 {
                candidates.push(g);
            }
        }
    }
    candidates.sort_by(f64::total_cmp);
    candidates.dedup();

    let mut best_gamma = 0.0;
    let mut best_value = f64::INFINITY;
    for g in candidates {
        let v = dual_value_from_losses(spec, &losses, posterior.probs(), g);
        // Ascending scan: strict improvement keeps the smallest minimizer.
        if best_value.is_infinite() || v < best_value - 1e-15 * best_value.abs().max(1.0) {
            best_value = v;
            best_gamma = g;
        }
    }
    let worst_labels = (0..losses.len())
        .map(|j| inner_sup_from_losses(&losses, j, best_gamma * kp).1)
        .collect();
    Ok(PerPointDualResult {
        gamma_grid_argmin: best_gamma,
        value: best_value,
        worst_labels,
    })
}

/// Worst-case expected loss over the total-variation ball of radius
/// `min(rho, 1)` around `posterior`.
///
/// Under the discrete cost `W_p^p(Q, P) = kappa^p * TV(Q, P)`, so the
/// Wasserstein ball is this TV ball. The optimum moves mass from the
/// lowest-loss classes onto the single highest-loss class.
pub fn primal_tv_oracle(
    spec: &RobustLossSpec,
    pred: &CategoricalDist,
    posterior: &CategoricalDist,
) -> Result<f64> {
    check_same_k(pred, posterior)?;
    let losses = spec.loss_vector(pred);
    let k = losses.len();
    let mut top = 0;
    for j in 1..k {
        if losses[j] > losses[top] {
            top = j;
        }
    }
    let mut q = posterior.probs().to_vec();
    let mut budget = spec.rho().min(1.0);
    let mut order: Vec<usize> = (0..k).filter(|&j| j != top).collect();
    order.sort_by(|a, b| losses[*a].total_cmp(&losses[*b]));
    for j in order {
        if budget <= 0.0 {
            break;
        }
        let moved = q[j].min(budget);
        q[j] -= moved;
        q[top] += moved;
        budget -= moved;
    }
    Ok(q.iter().zip(&losses).map(|(qj, l)| qj * l).sum())
}

/// Closed-form minimum over a shared `gamma` of the empirical dual risk.
///
/// With `alpha_{i,j} = max_j' T(psi_{i,j'}) - T(psi_{i,j})` sorted in
/// decreasing order (ties by instance then class) and `P` aligned, `s*` is
/// the first index where `(1/n) * cumsum(P)` reaches `rho`; the optimal
/// multiplier is `alpha^(s*) / kappa^p` with `alpha^(nK+1) = 0`.
pub fn closed_form_empirical_risk(
    spec: &RobustLossSpec,
    preds: &[CategoricalDist],
    posteriors: &[CategoricalDist],
) -> Result<ClosedFormRiskResult> {
    if preds.is_empty() {
        return Err(Error::EmptyInput("closed-form risk needs at least one point"));
    }
    if preds.len() != posteriors.len() {
        return Err(Error::LengthMismatch {
            left: preds.len(),
            right: posteriors.len(),
        });
    }
    let n = preds.len();
    let k = preds[0].k();
    let nf = n as f64;

    // (alpha, P, i, j)
    let mut entries: Vec<(f64, f64, usize, usize)> = Vec::with_capacity(n * k);
    let mut nominal = 0.0;
    for (i, (pred, post)) in preds.iter().zip(posteriors).enumerate() {
        check_same_k(pred, post)?;
        if pred.k() != k {
            return Err(Error::DimensionMismatch {
                expected: k,
                actual: pred.k(),
            });
        }
        let t: Vec<f64> = pred.probs().iter().map(|p| spec.transform.value(*p)).collect();
        let t_max = t.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        for j in 0..k {
            let pj = post.get(j);
            nominal += pj * t[j];
            entries.push((t_max - t[j], pj, i, j));
        }
    }
    nominal /= nf;
    entries.sort_by(|a, b| {
        b.0.total_cmp(&a.0)
            .then(a.2.cmp(&b.2))
            .then(a.3.cmp(&b.3))
    });

    let rho = spec.rho();
    let total = entries.len();
    let total_mass: f64 = entries.iter().map(|e| e.1).sum::<f64>() / nf;
    let mut cum = 0.0;
    let mut s_star = total + 1;
    let mut mass_before = 0.0;
    for (idx, e) in entries.iter().enumerate() {
        if rho >= total_mass - 1e-12 {
            break;
        }
        let next = cum + e.1 / nf;
        if next >= rho {
            s_star = idx + 1;
            mass_before = cum;
            break;
        }
        cum = next;
    }
    let alpha_sorted: Vec<f64> = entries.iter().map(|e| e.0).collect();
    let p_aligned: Vec<f64> = entries.iter().map(|e| e.1).collect();

    let head: f64 = entries
        .iter()
        .take(s_star - 1)
        .map(|e| e.1 * e.0)
        .sum::<f64>()
        / nf;
    let (alpha_s, remainder) = if s_star <= total {
        (alpha_sorted[s_star - 1], rho - mass_before)
    } else {
        (0.0, 0.0)
    };
    let robust_risk = nominal + head + alpha_s * remainder;
    Ok(ClosedFormRiskResult {
        gamma_star: alpha_s / spec.kappa_p(),
        s_star,
        robust_risk,
        nominal_risk: nominal,
        alpha_sorted,
        p_aligned,
    })
}

/// Empirical dual objective of the relaxed problem at a fixed `gamma`:
/// `gamma * eps^p + (1/n) sum_i sum_j P_ij max_{y'} {...}`.
pub fn empirical_dual_objective(
    spec: &RobustLossSpec,
    preds: &[CategoricalDist],
    posteriors: &[CategoricalDist],
    gamma: f64,
) -> Result<f64> {
    check_gamma(gamma)?;
    if preds.is_empty() {
        return Err(Error::EmptyInput("empirical objective needs at least one point"));
    }
    if preds.len() != posteriors.len() {
        return Err(Error::LengthMismatch {
            left: preds.len(),
            right: posteriors.len(),
        });
    }
    let mut sum = 0.0;
    for (pred, post) in preds.iter().zip(posteriors) {
        check_same_k(pred, post)?;
        let losses = spec.loss_vector(pred);
        sum += dual_value_from_losses(spec, &losses, post.probs(), gamma) - gamma * spec.epsilon_p();
    }
    Ok(gamma * spec.epsilon_p() + sum / preds.len() as f64)
}

/// One proximal step on the multiplier:
/// `argmin_{gamma >= 0} gamma * (eps^p - kappa^p * mismatch) + (lambda/2)(gamma - gamma_ref)^2`.
pub fn gamma_one_step(
    gamma_ref: f64,
    epsilon: f64,
    p: f64,
    kappa: f64,
    mismatch_rate: f64,
    lambda: f64,
) -> Result<f64> {
    if !(lambda.is_finite() && lambda > 0.0) {
        return Err(Error::Config(format!("lambda = {lambda} must be > 0")));
    }
    if !(0.0..=1.0).contains(&mismatch_rate) {
        return Err(Error::Config(format!(
            "mismatch rate {mismatch_rate} outside [0, 1]"
        )));
    }
    let grad = epsilon.powf(p) - kappa.powf(p) * mismatch_rate;
    Ok((gamma_ref - grad / lambda).max(0.0))
}
