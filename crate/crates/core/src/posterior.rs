//! Annotator confusions, true-label posteriors and label aggregation.
//!
//! Transitions are factorized across annotators: the likelihood of an
//! instance's annotations given true class `j` is the product of each
//! annotator's confusion entry for the label it reported.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::types::{AnnotationDataset, CategoricalDist};

/// Per-annotator confusion matrices; row `j` of annotator `r` is the
/// distribution of the reported label given true class `j`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConfusionModel {
    r: usize,
    k: usize,
    /// Flattened `[r][j][label]`.
    probs: Vec<f64>,
    smoothing: f64,
}

impl ConfusionModel {
    /// Builds a model from explicit matrices, validating every row.
    pub fn new(per_annotator: Vec<Vec<Vec<f64>>>, smoothing: f64) -> Result<Self> {
        let r = per_annotator.len();
        if r == 0 {
            return Err(Error::EmptyInput("confusion model needs an annotator"));
        }
        let k = per_annotator[0].len();
        let mut probs = Vec::with_capacity(r * k * k);
        for m in &per_annotator {
            if m.len() != k {
                return Err(Error::DimensionMismatch { expected: k, actual: m.len() });
            }
            for row in m {
                probs.extend(CategoricalDist::new(row.clone())?.into_vec());
            }
        }
        Ok(Self { r, k, probs, smoothing })
    }

    /// Every annotator reports the true label with probability `diag` and
    /// the others uniformly.
    pub fn symmetric(r: usize, k: usize, diag: f64) -> Result<Self> {
        let off = (1.0 - diag) / (k - 1) as f64;
        let m: Vec<Vec<f64>> = (0..k)
            .map(|j| (0..k).map(|l| if l == j { diag } else { off }).collect())
            .collect();
        Self::new(vec![m; r], 0.0)
    }

    pub fn r(&self) -> usize {
        self.r
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn smoothing(&self) -> f64 {
        self.smoothing
    }

    pub fn prob(&self, annotator: usize, true_class: usize, label: usize) -> f64 {
        self.probs[(annotator * self.k + true_class) * self.k + label]
    }

    pub fn row(&self, annotator: usize, true_class: usize) -> &[f64] {
        let start = (annotator * self.k + true_class) * self.k;
        &self.probs[start..start + self.k]
    }

    pub fn matrix(&self, annotator: usize) -> Vec<Vec<f64>> {
        (0..self.k).map(|j| self.row(annotator, j).to_vec()).collect()
    }

    /// `log P(annotations | Y = j)` for every `j`.
    fn log_likelihood(&self, annotations: &[(usize, usize)]) -> Result<Vec<f64>> {
        let mut ll = vec![0.0; self.k];
        for &(a, l) in annotations {
            if a >= self.r {
                return Err(Error::LabelOutOfRange { label: a, k: self.r });
            }
            if l >= self.k {
                return Err(Error::LabelOutOfRange { label: l, k: self.k });
            }
            for (j, v) in ll.iter_mut().enumerate() {
                *v += self.prob(a, j, l).ln();
            }
        }
        Ok(ll)
    }
}

/// Plurality label per instance; ties are broken uniformly at random with a
/// generator seeded by `seed`.
pub fn majority_vote(dataset: &AnnotationDataset, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = dataset.k();
    let mut counts = vec![0usize; k];
    (0..dataset.n())
        .map(|i| {
            counts.iter_mut().for_each(|c| *c = 0);
            for &(_, l) in dataset.annotations_of(i) {
                counts[l] += 1;
            }
            let best = *counts.iter().max().unwrap_or(&0);
            let tied: Vec<usize> = (0..k).filter(|&j| counts[j] == best).collect();
            if tied.len() == 1 {
                tied[0]
            } else {
                tied[rng.random_range(0..tied.len())]
            }
        })
        .collect()
}

/// Vote shares per instance.
pub fn vote_distribution(dataset: &AnnotationDataset) -> Vec<CategoricalDist> {
    (0..dataset.n())
        .map(|i| {
            let mut w = vec![0.0; dataset.k()];
            for &(_, l) in dataset.annotations_of(i) {
                w[l] += 1.0;
            }
            CategoricalDist::from_weights(&w).expect("every instance has an annotation")
        })
        .collect()
}

/// Frequency estimate of each annotator's confusion matrix from anchor
/// instances with trusted labels:
/// `(count[r][j][l] + s) / (sum_l count[r][j][l] + K s)`.
///
/// A row with no observations and `s = 0` is set to uniform.
pub fn estimate_confusions(
    dataset: &AnnotationDataset,
    anchors: &[(usize, usize)],
    smoothing: f64,
) -> Result<ConfusionModel> {
    if anchors.is_empty() {
        return Err(Error::EmptyInput("no anchor instances for confusion estimation"));
    }
    if !(smoothing >= 0.0) {
        return Err(Error::Config(format!("smoothing must be nonnegative, got {smoothing}")));
    }
    let (r, k) = (dataset.r(), dataset.k());
    let mut counts = vec![0.0; r * k * k];
    for &(i, j) in anchors {
        if i >= dataset.n() {
            return Err(Error::LabelOutOfRange { label: i, k: dataset.n() });
        }
        if j >= k {
            return Err(Error::LabelOutOfRange { label: j, k });
        }
        for &(a, l) in dataset.annotations_of(i) {
            counts[(a * k + j) * k + l] += 1.0;
        }
    }
    Ok(normalize_counts(r, k, counts, smoothing))
}

fn normalize_counts(r: usize, k: usize, mut counts: Vec<f64>, smoothing: f64) -> ConfusionModel {
    for row in counts.chunks_mut(k) {
        let total: f64 = row.iter().sum::<f64>() + k as f64 * smoothing;
        if total > 0.0 {
            row.iter_mut().for_each(|c| *c = (*c + smoothing) / total);
        } else {
            row.iter_mut().for_each(|c| *c = 1.0 / k as f64);
        }
    }
    ConfusionModel { r, k, probs: counts, smoothing }
}

/// `P(Y = j | x, annotations) ∝ prior[j] * prod_r conf[r][j][label_r]`,
/// computed in log space. Returns `prior` if every class has zero likelihood.
pub fn bayes_posterior(
    prior: &CategoricalDist,
    confusions: &ConfusionModel,
    annotations: &[(usize, usize)],
) -> Result<CategoricalDist> {
    if prior.k() != confusions.k() {
        return Err(Error::DimensionMismatch {
            expected: confusions.k(),
            actual: prior.k(),
        });
    }
    let mut logp = confusions.log_likelihood(annotations)?;
    for (v, p) in logp.iter_mut().zip(prior.probs()) {
        *v += p.ln();
    }
    Ok(normalize_log(&logp).unwrap_or_else(|| prior.clone()))
}

/// Softmax of log weights; `None` when all are `-inf`.
fn normalize_log(logp: &[f64]) -> Option<CategoricalDist> {
    let m = logp.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return None;
    }
    let w: Vec<f64> = logp.iter().map(|v| (v - m).exp()).collect();
    CategoricalDist::from_weights(&w).ok()
}

#[derive(Debug, Clone, Serialize)]
pub struct EmResult {
    pub posteriors: Vec<CategoricalDist>,
    pub confusions: ConfusionModel,
    pub class_prior: CategoricalDist,
    /// Observed-data log-likelihood at each iteration's parameters.
    pub log_likelihood: Vec<f64>,
    /// Log-likelihood plus the log Dirichlet prior implied by `smoothing`;
    /// equal to `log_likelihood` when smoothing is zero.
    pub objective: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

/// Dawid-Skene EM initialized from vote shares.
///
/// With `smoothing > 0` the M-step is a MAP update under a symmetric
/// Dirichlet prior, so `objective` is the monotone quantity.
pub fn dawid_skene_em(
    dataset: &AnnotationDataset,
    max_iters: usize,
    tol: f64,
    smoothing: f64,
) -> Result<EmResult> {
    if max_iters == 0 {
        return Err(Error::Config("max_iters must be at least 1".into()));
    }
    if !(smoothing >= 0.0) {
        return Err(Error::Config(format!("smoothing must be nonnegative, got {smoothing}")));
    }
    let (n, r, k) = (dataset.n(), dataset.r(), dataset.k());
    let mut posteriors = vote_distribution(dataset);
    let mut log_likelihood = Vec::new();
    let mut objective = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    let mut confusions;
    let mut class_prior;

    loop {
        iterations += 1;
        // M-step.
        let mut prior_w = vec![smoothing; k];
        let mut counts = vec![0.0; r * k * k];
        for (i, post) in posteriors.iter().enumerate() {
            for (j, pj) in post.probs().iter().enumerate() {
                prior_w[j] += pj;
                for &(a, l) in dataset.annotations_of(i) {
                    counts[(a * k + j) * k + l] += pj;
                }
            }
        }
        class_prior = CategoricalDist::from_weights(&prior_w)
            .unwrap_or_else(|_| CategoricalDist::uniform(k));
        confusions = normalize_counts(r, k, counts, smoothing);

        // E-step, accumulating the log-likelihood of the new parameters.
        let log_prior: Vec<f64> = class_prior.probs().iter().map(|p| p.ln()).collect();
        let mut ll = 0.0;
        let mut max_change: f64 = 0.0;
        let mut next = Vec::with_capacity(n);
        for (i, old) in posteriors.iter().enumerate() {
            let mut logp = confusions.log_likelihood(dataset.annotations_of(i))?;
            for (v, lp) in logp.iter_mut().zip(&log_prior) {
                *v += lp;
            }
            ll += log_sum_exp(&logp);
            let post = normalize_log(&logp).unwrap_or_else(|| old.clone());
            for (a, b) in post.probs().iter().zip(old.probs()) {
                max_change = max_change.max((a - b).abs());
            }
            next.push(post);
        }
        posteriors = next;
        let penalty = if smoothing > 0.0 {
            smoothing
                * (log_prior.iter().sum::<f64>()
                    + confusions.probs.iter().map(|p| p.ln()).sum::<f64>())
        } else {
            0.0
        };
        log_likelihood.push(ll);
        objective.push(ll + penalty);

        if max_change < tol {
            converged = true;
            break;
        }
        if iterations >= max_iters {
            break;
        }
    }

    Ok(EmResult {
        posteriors,
        confusions,
        class_prior,
        log_likelihood,
        objective,
        iterations,
        converged,
    })
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::Annotation;
    use rand::seq::SliceRandom;

    fn dataset(k: usize, r: usize, triples: &[(usize, usize, usize)]) -> AnnotationDataset {
        let n = triples.iter().map(|t| t.0).max().unwrap() + 1;
        let ann = triples
            .iter()
            .map(|&(instance, annotator, label)| Annotation { instance, annotator, label })
            .collect();
        AnnotationDataset::new(vec![0.0; n], 1, k, r, ann, None).unwrap()
    }

    fn dist(v: &[f64]) -> CategoricalDist {
        CategoricalDist::new(v.to_vec()).unwrap()
    }

    /// Class-conditional annotations from a symmetric confusion.
    fn simulate(n: usize, k: usize, r: usize, diag: f64, seed: u64) -> (AnnotationDataset, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let truth: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let mut ann = Vec::new();
        for (i, &y) in truth.iter().enumerate() {
            for a in 0..r {
                let label = if rng.random::<f64>() < diag {
                    y
                } else {
                    let mut other = rng.random_range(0..k - 1);
                    if other >= y {
                        other += 1;
                    }
                    other
                };
                ann.push(Annotation { instance: i, annotator: a, label });
            }
        }
        let ds = AnnotationDataset::new(vec![0.0; n], 1, k, r, ann, Some(truth.clone())).unwrap();
        (ds, truth)
    }

    #[test]
    fn majority_vote_examples() {
        let ds = dataset(3, 3, &[(0, 0, 1), (0, 1, 1), (0, 2, 2), (1, 0, 2), (2, 0, 1), (2, 1, 2)]);
        let mv = majority_vote(&ds, 7);
        assert_eq!(mv[0], 1);
        assert_eq!(mv[1], 2);
        assert!(mv[2] == 1 || mv[2] == 2);
        assert_eq!(mv, majority_vote(&ds, 7));
        // Over many seeds both tied labels appear.
        let picks: std::collections::BTreeSet<usize> = (0..64).map(|s| majority_vote(&ds, s)[2]).collect();
        assert_eq!(picks.len(), 2);
    }

    #[test]
    fn estimate_confusions_examples() {
        let perfect = dataset(2, 1, &[(0, 0, 0), (1, 0, 0), (2, 0, 0)]);
        let anchors = [(0, 0), (1, 0), (2, 0)];
        let m = estimate_confusions(&perfect, &anchors, 0.0).unwrap();
        assert_eq!(m.row(0, 0), &[1.0, 0.0]);

        let m = estimate_confusions(&perfect, &anchors, 1.0).unwrap();
        assert_eq!(m.row(0, 1), &[0.5, 0.5]);

        let mut triples: Vec<_> = (0..8).map(|i| (i, 0, 0)).collect();
        triples.extend((8..10).map(|i| (i, 0, 1)));
        let ds = dataset(2, 1, &triples);
        let anchors: Vec<_> = (0..10).map(|i| (i, 0)).collect();
        let m = estimate_confusions(&ds, &anchors, 1.0).unwrap();
        assert!((m.prob(0, 0, 0) - 9.0 / 12.0).abs() < 1e-15);
        assert!((m.prob(0, 0, 1) - 3.0 / 12.0).abs() < 1e-15);

        assert!(matches!(estimate_confusions(&ds, &[], 1.0), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn bayes_posterior_examples() {
        let perfect = ConfusionModel::new(vec![vec![vec![1.0, 0.0], vec![0.0, 1.0]]], 0.0).unwrap();
        let post = bayes_posterior(&CategoricalDist::uniform(2), &perfect, &[(0, 1)]).unwrap();
        assert_eq!(post.probs(), &[0.0, 1.0]);

        let twin = ConfusionModel::symmetric(2, 2, 0.7).unwrap();
        let a = bayes_posterior(&CategoricalDist::uniform(2), &twin, &[(0, 1)]).unwrap();
        let b = bayes_posterior(&CategoricalDist::uniform(2), &twin, &[(1, 1)]).unwrap();
        assert_eq!(a, b);

        let c = ConfusionModel::new(vec![vec![vec![0.8, 0.2], vec![0.3, 0.7]]], 0.0).unwrap();
        let post = bayes_posterior(&dist(&[0.6, 0.4]), &c, &[(0, 0)]).unwrap();
        assert!((post.get(0) - 0.8).abs() < 1e-12);
        assert!((post.get(1) - 0.2).abs() < 1e-12);

        assert!(bayes_posterior(&dist(&[0.6, 0.4]), &c, &[(3, 0)]).is_err());
    }

    #[test]
    fn bayes_posterior_underflow_returns_prior() {
        // Impossible evidence: class 0 never reports 1, class 1 never reports 0.
        let perfect = ConfusionModel::symmetric(2, 2, 1.0).unwrap();
        let prior = dist(&[0.3, 0.7]);
        let post = bayes_posterior(&prior, &perfect, &[(0, 0), (1, 1)]).unwrap();
        assert_eq!(post, prior);
        // Many annotators: the log-space product does not underflow.
        let weak = ConfusionModel::symmetric(2000, 2, 0.6).unwrap();
        let ann: Vec<_> = (0..2000).map(|a| (a, 0)).collect();
        let post = bayes_posterior(&CategoricalDist::uniform(2), &weak, &ann).unwrap();
        assert!((post.get(0) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn em_unanimous_converges_fast() {
        let triples: Vec<_> = (0..20).flat_map(|i| (0..3).map(move |a| (i, a, i % 3))).collect();
        let ds = dataset(3, 3, &triples);
        let em = dawid_skene_em(&ds, 50, 1e-9, 0.0).unwrap();
        assert!(em.converged);
        assert!(em.iterations <= 2);
        for (i, p) in em.posteriors.iter().enumerate() {
            assert_eq!(p, &CategoricalDist::point_mass(3, i % 3));
        }
    }

    #[test]
    fn em_single_annotator_follows_labels() {
        let triples: Vec<_> = (0..30).map(|i| (i, 0, usize::from(i % 3 == 0))).collect();
        let ds = dataset(2, 1, &triples);
        // R = 1 is not identifiable, so only the first update is checked;
        // later iterations may drift toward the majority class.
        let em = dawid_skene_em(&ds, 1, 1e-10, 0.5).unwrap();
        for (i, p) in em.posteriors.iter().enumerate() {
            assert_eq!(p.argmax(), usize::from(i % 3 == 0));
            assert!(p.get(p.argmax()) < 1.0);
        }
    }

    #[test]
    fn em_recovers_symmetric_diagonal() {
        let (ds, truth) = simulate(200, 2, 3, 0.8, 11);
        let em = dawid_skene_em(&ds, 200, 1e-8, 0.01).unwrap();
        for a in 0..3 {
            for j in 0..2 {
                assert!((em.confusions.prob(a, j, j) - 0.8).abs() < 0.07);
            }
        }
        let acc = em
            .posteriors
            .iter()
            .zip(&truth)
            .filter(|(p, y)| p.argmax() == **y)
            .count() as f64
            / 200.0;
        assert!(acc > 0.85);
    }

    #[test]
    fn em_likelihood_is_monotone() {
        for seed in 0..5 {
            let (ds, _) = simulate(300, 3, 4, 0.6, seed);
            let plain = dawid_skene_em(&ds, 60, 0.0, 0.0).unwrap();
            for w in plain.log_likelihood.windows(2) {
                assert!(w[1] >= w[0] - 1e-9, "{w:?}");
            }
            let smoothed = dawid_skene_em(&ds, 60, 0.0, 1.0).unwrap();
            for w in smoothed.objective.windows(2) {
                assert!(w[1] >= w[0] - 1e-9, "{w:?}");
            }
        }
    }

    proptest::proptest! {
        #[test]
        fn posterior_invariant_to_annotation_order(
            seed in 0u64..1000,
            m in 1usize..6,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let k = 3;
            let mats: Vec<Vec<Vec<f64>>> = (0..m)
                .map(|_| (0..k).map(|_| {
                    let w: Vec<f64> = (0..k).map(|_| rng.random::<f64>() + 0.01).collect();
                    let s: f64 = w.iter().sum();
                    w.iter().map(|x| x / s).collect()
                }).collect())
                .collect();
            let conf = ConfusionModel::new(mats, 0.0).unwrap();
            let mut ann: Vec<(usize, usize)> = (0..m).map(|a| (a, rng.random_range(0..k))).collect();
            let prior = dist(&[0.2, 0.5, 0.3]);
            let a = bayes_posterior(&prior, &conf, &ann).unwrap();
            ann.shuffle(&mut rng);
            let b = bayes_posterior(&prior, &conf, &ann).unwrap();
            for (x, y) in a.probs().iter().zip(b.probs()) {
                proptest::prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn estimated_rows_are_distributions(seed in 0u64..1000, s in 0.0f64..3.0) {
            let (ds, truth) = simulate(40, 3, 3, 0.7, seed);
            let anchors: Vec<_> = truth.iter().copied().enumerate().take(25).collect();
            let m = estimate_confusions(&ds, &anchors, s).unwrap();
            for a in 0..3 {
                for j in 0..3 {
                    let row = m.row(a, j);
                    proptest::prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                    if s > 0.0 {
                        proptest::prop_assert!(row.iter().all(|v| *v > 0.0));
                    }
                }
            }
        }
    }
}
