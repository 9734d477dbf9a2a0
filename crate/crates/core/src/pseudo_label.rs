//! Likelihood-ratio pseudo-labels and the pseudo-empirical reference
//! distribution built from them.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::types::{AnnotationDataset, CategoricalDist};

const RATIO_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PseudoLabel {
    pub instance: usize,
    pub label: usize,
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PseudoLabelSet {
    pub entries: Vec<PseudoLabel>,
    pub threshold: f64,
    /// Fraction of instances that received a pseudo-label.
    pub coverage: f64,
}

impl PseudoLabelSet {
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    /// Point-mass reference distributions, one per entry.
    pub fn point_masses(&self, k: usize) -> Vec<CategoricalDist> {
        self.entries
            .iter()
            .map(|e| CategoricalDist::point_mass(k, e.label))
            .collect()
    }

    /// Fraction of entries agreeing with `truth`; `None` when empty.
    pub fn precision(&self, truth: &[usize]) -> Option<f64> {
        if self.entries.is_empty() {
            return None;
        }
        let hits = self
            .entries
            .iter()
            .filter(|e| truth[e.instance] == e.label)
            .count();
        Some(hits as f64 / self.entries.len() as f64)
    }
}

fn check_threshold(threshold: f64) -> Result<()> {
    if threshold.is_nan() || threshold <= 1.0 {
        Err(Error::InvalidThreshold(threshold))
    } else {
        Ok(())
    }
}

/// Assigns the argmax class when its posterior is at least `threshold`
/// times the runner-up. Exact argmax ties abstain.
pub fn lrt_assign(posterior: &CategoricalDist, threshold: f64) -> Result<Option<(usize, f64)>> {
    check_threshold(threshold)?;
    Ok(lrt_unchecked(posterior, threshold))
}

fn lrt_unchecked(posterior: &CategoricalDist, threshold: f64) -> Option<(usize, f64)> {
    let p = posterior.probs();
    let top = posterior.argmax();
    let runner_up = p
        .iter()
        .enumerate()
        .filter(|(j, _)| *j != top)
        .map(|(_, v)| *v)
        .fold(f64::NEG_INFINITY, f64::max);
    if runner_up >= p[top] {
        return None;
    }
    let ratio = p[top] / runner_up.max(RATIO_FLOOR);
    (ratio >= threshold).then_some((top, ratio))
}

/// Runs [`lrt_assign`] on every instance. Unselected instances are left out
/// of the reference distribution.
pub fn build_pseudo_empirical(
    dataset: &AnnotationDataset,
    posteriors: &[CategoricalDist],
    threshold: f64,
) -> Result<PseudoLabelSet> {
    check_threshold(threshold)?;
    if posteriors.len() != dataset.n() {
        return Err(Error::LengthMismatch {
            left: posteriors.len(),
            right: dataset.n(),
        });
    }
    let entries: Vec<PseudoLabel> = posteriors
        .iter()
        .enumerate()
        .filter_map(|(instance, post)| {
            lrt_unchecked(post, threshold).map(|(label, ratio)| PseudoLabel {
                instance,
                label,
                ratio,
            })
        })
        .collect();
    let coverage = entries.len() as f64 / dataset.n() as f64;
    Ok(PseudoLabelSet {
        entries,
        threshold,
        coverage,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::Annotation;

    fn dist(v: &[f64]) -> CategoricalDist {
        CategoricalDist::new(v.to_vec()).unwrap()
    }

    fn toy_dataset(n: usize) -> AnnotationDataset {
        let ann = (0..n)
            .map(|i| Annotation { instance: i, annotator: 0, label: 0 })
            .collect();
        AnnotationDataset::new(vec![0.0; n], 1, 3, 1, ann, None).unwrap()
    }

    #[test]
    fn lrt_examples() {
        let (c, r) = lrt_assign(&dist(&[0.8, 0.15, 0.05]), 2.0).unwrap().unwrap();
        assert_eq!(c, 0);
        assert!((r - 0.8 / 0.15).abs() < 1e-12);
        assert!(lrt_assign(&dist(&[0.5, 0.45, 0.05]), 2.0).unwrap().is_none());
        let (c, r) = lrt_assign(&dist(&[1.0, 0.0, 0.0]), 100.0).unwrap().unwrap();
        assert_eq!(c, 0);
        assert!(r >= 1e11);
        assert!(lrt_assign(&dist(&[0.4, 0.4, 0.2]), 1.01).unwrap().is_none());
        assert!(matches!(
            lrt_assign(&dist(&[0.8, 0.2]), 1.0),
            Err(Error::InvalidThreshold(_))
        ));
    }

    #[test]
    fn coverage_examples() {
        let ds = toy_dataset(5);
        let masses: Vec<_> = (0..5).map(|i| CategoricalDist::point_mass(3, i % 3)).collect();
        assert_eq!(build_pseudo_empirical(&ds, &masses, 2.0).unwrap().coverage, 1.0);

        let uni = vec![CategoricalDist::uniform(3); 5];
        assert_eq!(build_pseudo_empirical(&ds, &uni, 1.01).unwrap().coverage, 0.0);

        // ratios: 4, 1.5, 8, 1.0 (tie), 3 -> three pass at threshold 2.
        let mixed = vec![
            dist(&[0.8, 0.2, 0.0]),
            dist(&[0.3, 0.5, 0.2]),
            dist(&[0.1, 0.8, 0.1]),
            dist(&[0.45, 0.1, 0.45]),
            dist(&[0.15, 0.1, 0.75]),
        ];
        let set = build_pseudo_empirical(&ds, &mixed, 2.0).unwrap();
        assert!((set.coverage - 0.6).abs() < 1e-15);
        let picked: Vec<_> = set.entries.iter().map(|e| (e.instance, e.label)).collect();
        assert_eq!(picked, vec![(0, 0), (2, 1), (4, 2)]);
        assert!(set.entries.iter().all(|e| e.ratio >= 2.0));
        assert_eq!(set, build_pseudo_empirical(&ds, &mixed, 2.0).unwrap());
    }

    proptest::proptest! {
        #[test]
        fn coverage_nonincreasing_in_threshold(
            w in proptest::collection::vec(proptest::collection::vec(0.0f64..1.0, 3), 1..30),
            c1 in 1.01f64..20.0,
            dc in 0.0f64..20.0,
        ) {
            let posts: Vec<_> = w
                .iter()
                .map(|v| {
                    let s: f64 = v.iter().sum::<f64>() + 1e-3;
                    let mut p: Vec<f64> = v.iter().map(|x| (x + 1e-3 / 3.0) / s).collect();
                    let t: f64 = p.iter().sum();
                    p.iter_mut().for_each(|x| *x /= t);
                    CategoricalDist::new(p).unwrap()
                })
                .collect();
            let ds = toy_dataset(posts.len());
            let lo = build_pseudo_empirical(&ds, &posts, c1).unwrap();
            let hi = build_pseudo_empirical(&ds, &posts, c1 + dc).unwrap();
            proptest::prop_assert!(hi.coverage <= lo.coverage);
        }
    }
}
