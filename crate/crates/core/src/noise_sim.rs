//! Synthetic Gaussian data and instance-dependent noisy annotators.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::posterior::ConfusionModel;
use crate::types::{Annotation, AnnotationDataset};

/// Features with clean labels and no annotations.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CleanDataset {
    n: usize,
    d: usize,
    k: usize,
    features: Vec<f64>,
    labels: Vec<usize>,
}

impl CleanDataset {
    pub fn new(features: Vec<f64>, d: usize, k: usize, labels: Vec<usize>) -> Result<Self> {
        if d == 0 || features.len() % d != 0 {
            return Err(Error::InvalidDataset(format!(
                "{} feature values do not form rows of width {d}",
                features.len()
            )));
        }
        let n = features.len() / d;
        if labels.len() != n {
            return Err(Error::LengthMismatch { left: labels.len(), right: n });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::LabelOutOfRange { label: bad, k });
        }
        Ok(Self { n, d, k, features, labels })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.d..(i + 1) * self.d]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }
}

/// Class means of the Gaussian mixture. Pairwise distance is `separation`
/// when `k <= d` (scaled basis vectors); otherwise the means sit on a
/// regular polygon in the first two coordinates with adjacent distance
/// `separation`.
pub fn class_means(d: usize, k: usize, separation: f64) -> Vec<Vec<f64>> {
    (0..k)
        .map(|j| {
            let mut m = vec![0.0; d];
            if k <= d {
                m[j] = separation / std::f64::consts::SQRT_2;
            } else {
                let angle = 2.0 * std::f64::consts::PI * j as f64 / k as f64;
                let radius = separation / (2.0 * (std::f64::consts::PI / k as f64).sin());
                m[0] = radius * angle.cos();
                m[1] = radius * angle.sin();
            }
            m
        })
        .collect()
}

/// Balanced `k`-class mixture of unit-covariance Gaussians. The means do
/// not depend on `seed`, so draws with different seeds share a distribution.
pub fn make_gaussian_dataset(
    n: usize,
    d: usize,
    k: usize,
    separation: f64,
    seed: u64,
) -> Result<CleanDataset> {
    if k < 2 || d < 2 || n < k {
        return Err(Error::InvalidDataset(format!(
            "need k >= 2, d >= 2 and n >= k (n={n}, d={d}, k={k})"
        )));
    }
    if !(separation >= 0.0) || !separation.is_finite() {
        return Err(Error::InvalidDataset(format!("bad separation {separation}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let means = class_means(d, k, separation);
    let mut labels: Vec<usize> = (0..n).map(|i| i % k).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        labels.swap(i, j);
    }
    let mut features = Vec::with_capacity(n * d);
    for &y in &labels {
        for mu in &means[y] {
            let z: f64 = StandardNormal.sample(&mut rng);
            features.push(mu + z);
        }
    }
    CleanDataset::new(features, d, k, labels)
}

/// One simulated annotator. `target_rate` is the mean flip probability over
/// the dataset (the per-instance probability is capped at twice that); `projection_seed` picks the feature directions that make
/// the flips instance dependent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnnotatorSpec {
    pub target_rate: f64,
    pub projection_seed: u64,
}

impl AnnotatorSpec {
    pub fn new(target_rate: f64, projection_seed: u64) -> Result<Self> {
        if !(0.0..1.0).contains(&target_rate) {
            return Err(Error::Config(format!("target rate {target_rate} outside [0, 1)")));
        }
        Ok(Self { target_rate, projection_seed })
    }
}

/// Annotator groups as `(count, rate)` triples for each preset level.
const GROUPS: [(usize, [usize; 3]); 6] = [
    (5, [2, 2, 1]),
    (10, [4, 4, 2]),
    (30, [11, 11, 8]),
    (50, [18, 18, 14]),
    (100, [35, 35, 30]),
    (200, [70, 70, 60]),
];

const LEVELS: [(&str, [f64; 3]); 3] = [
    ("low", [0.1, 0.2, 0.3]),
    ("mid", [0.3, 0.4, 0.5]),
    ("high", [0.5, 0.6, 0.7]),
];

/// All preset names, e.g. `idn-mid-r5`.
pub fn preset_names() -> Vec<String> {
    LEVELS
        .iter()
        .flat_map(|(level, _)| GROUPS.iter().map(move |(r, _)| format!("idn-{level}-r{r}")))
        .collect()
}

/// Annotator group for a preset name such as `idn-high-r30`.
pub fn preset(name: &str) -> Result<Vec<AnnotatorSpec>> {
    let unknown = || Error::Config(format!("unknown preset `{name}`; try one of {}", preset_names().join(", ")));
    let rest = name.strip_prefix("idn-").ok_or_else(unknown)?;
    let (level, r) = rest.split_once("-r").ok_or_else(unknown)?;
    let rates = LEVELS.iter().find(|(l, _)| *l == level).ok_or_else(unknown)?.1;
    let r: usize = r.parse().map_err(|_| unknown())?;
    let counts = GROUPS.iter().find(|(g, _)| *g == r).ok_or_else(unknown)?.1;
    let mut specs = Vec::with_capacity(r);
    for (count, rate) in counts.iter().zip(rates) {
        for _ in 0..*count {
            specs.push(AnnotatorSpec::new(rate, specs.len() as u64)?);
        }
    }
    Ok(specs)
}

fn mix(seed: u64, salt: u64) -> u64 {
    // splitmix64 finalizer over the combined words.
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// Feature directions of one annotator: `rate` drives the flip probability,
/// `dest` (one per class) scores flip destinations.
struct AnnotatorModel {
    flip_prob: Vec<f64>,
    dest: Vec<Vec<f64>>,
}

impl AnnotatorModel {
    fn build(data: &CleanDataset, spec: &AnnotatorSpec, seed: u64) -> Self {
        let (d, k) = (data.d(), data.k());
        let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, spec.projection_seed));
        let scale = 1.0 / (d as f64).sqrt();
        let gauss = |rng: &mut ChaCha8Rng| -> Vec<f64> {
            (0..d)
                .map(|_| scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
                .collect()
        };
        let rate = gauss(&mut rng);
        let dest: Vec<Vec<f64>> = (0..k).map(|_| gauss(&mut rng)).collect();

        let proj: Vec<f64> = (0..data.n()).map(|i| dot(data.row(i), &rate)).collect();
        let n = proj.len() as f64;
        let mean = proj.iter().sum::<f64>() / n;
        let sd = (proj.iter().map(|p| (p - mean).powi(2)).sum::<f64>() / n).sqrt();
        let w: Vec<f64> = proj
            .iter()
            .map(|p| softplus(if sd > 0.0 { (p - mean) / sd } else { 0.0 }))
            .collect();
        let w_mean = w.iter().sum::<f64>() / n;
        let tau = spec.target_rate;
        let cap = (2.0 * tau).min(1.0);
        // Clipping removes mass, so rescale until the mean is back at tau.
        let mean_at = |c: f64| w.iter().map(|wi| (c * tau * wi / w_mean).min(cap)).sum::<f64>() / n;
        let (mut lo, mut hi) = (1.0, 1.0);
        if tau > 0.0 {
            while mean_at(hi) < tau && hi < 1e6 {
                hi *= 2.0;
            }
            for _ in 0..100 {
                let mid = 0.5 * (lo + hi);
                if mean_at(mid) < tau {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
        }
        let flip_prob = w.iter().map(|wi| (hi * tau * wi / w_mean).clamp(0.0, cap)).collect();
        Self { flip_prob, dest }
    }

    fn flip_destination(&self, x: &[f64], y: usize, rng: &mut ChaCha8Rng) -> usize {
        let scores: Vec<f64> = self.dest.iter().map(|u| dot(x, u)).collect();
        let m = scores
            .iter()
            .enumerate()
            .filter(|(c, _)| *c != y)
            .map(|(_, s)| *s)
            .fold(f64::NEG_INFINITY, f64::max);
        let weights: Vec<f64> = scores
            .iter()
            .enumerate()
            .map(|(c, s)| if c == y { 0.0 } else { (s - m).exp() })
            .collect();
        let total: f64 = weights.iter().sum();
        let mut u = rng.random::<f64>() * total;
        let mut last = y;
        for (c, w) in weights.iter().enumerate() {
            if c == y {
                continue;
            }
            last = c;
            if u < *w {
                return c;
            }
            u -= w;
        }
        last
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Per-instance flip probabilities of one annotator, as used by
/// [`annotate`] with the same `seed`.
pub fn flip_probabilities(data: &CleanDataset, spec: &AnnotatorSpec, seed: u64) -> Vec<f64> {
    AnnotatorModel::build(data, spec, seed).flip_prob
}

fn check_per_instance(labels_per_instance: usize, r: usize) -> Result<()> {
    if labels_per_instance == 0 || labels_per_instance > r {
        return Err(Error::Config(format!(
            "labels_per_instance must be in [1, {r}], got {labels_per_instance}"
        )));
    }
    Ok(())
}

/// Draws `labels_per_instance` distinct annotators per instance and lets
/// each flip the true label with its instance-dependent probability.
pub fn annotate(
    data: &CleanDataset,
    annotators: &[AnnotatorSpec],
    labels_per_instance: usize,
    seed: u64,
) -> Result<AnnotationDataset> {
    let r = annotators.len();
    check_per_instance(labels_per_instance, r)?;
    let models: Vec<AnnotatorModel> = annotators
        .iter()
        .map(|a| AnnotatorModel::build(data, a, seed))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, u64::MAX));
    let mut ann = Vec::with_capacity(data.n() * labels_per_instance);
    for i in 0..data.n() {
        let y = data.labels()[i];
        let mut chosen = sample(&mut rng, r, labels_per_instance).into_vec();
        chosen.sort_unstable();
        for a in chosen {
            let model = &models[a];
            let label = if rng.random::<f64>() < model.flip_prob[i] {
                model.flip_destination(data.row(i), y, &mut rng)
            } else {
                y
            };
            ann.push(Annotation { instance: i, annotator: a, label });
        }
    }
    AnnotationDataset::new(
        data.features().to_vec(),
        data.d(),
        data.k(),
        r,
        ann,
        Some(data.labels().to_vec()),
    )
}

/// Class-conditional annotations: annotator `r` reports label `l` for true
/// class `j` with probability `confusions.prob(r, j, l)`.
pub fn annotate_class_conditional(
    data: &CleanDataset,
    confusions: &ConfusionModel,
    labels_per_instance: usize,
    seed: u64,
) -> Result<AnnotationDataset> {
    if confusions.k() != data.k() {
        return Err(Error::DimensionMismatch { expected: data.k(), actual: confusions.k() });
    }
    let r = confusions.r();
    check_per_instance(labels_per_instance, r)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ann = Vec::with_capacity(data.n() * labels_per_instance);
    for i in 0..data.n() {
        let y = data.labels()[i];
        let mut chosen = sample(&mut rng, r, labels_per_instance).into_vec();
        chosen.sort_unstable();
        for a in chosen {
            let row = confusions.row(a, y);
            let mut u = rng.random::<f64>();
            let mut label = row.len() - 1;
            for (l, p) in row.iter().enumerate() {
                if u < *p {
                    label = l;
                    break;
                }
                u -= p;
            }
            ann.push(Annotation { instance: i, annotator: a, label });
        }
    }
    AnnotationDataset::new(
        data.features().to_vec(),
        data.d(),
        data.k(),
        r,
        ann,
        Some(data.labels().to_vec()),
    )
}

/// Fraction of annotations that differ from the true label.
pub fn realized_noise_rate(dataset: &AnnotationDataset) -> Option<f64> {
    let truth = dataset.true_labels()?;
    let wrong = dataset
        .annotations()
        .iter()
        .filter(|a| a.label != truth[a.instance])
        .count();
    Some(wrong as f64 / dataset.annotations().len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn nearest_mean_accuracy(data: &CleanDataset, separation: f64) -> f64 {
        let means = class_means(data.d(), data.k(), separation);
        let hits = (0..data.n())
            .filter(|&i| {
                let x = data.row(i);
                let best = (0..data.k())
                    .min_by(|&a, &b| {
                        let da: f64 = x.iter().zip(&means[a]).map(|(u, v)| (u - v).powi(2)).sum();
                        let db: f64 = x.iter().zip(&means[b]).map(|(u, v)| (u - v).powi(2)).sum();
                        da.total_cmp(&db)
                    })
                    .unwrap();
                best == data.labels()[i]
            })
            .count();
        hits as f64 / data.n() as f64
    }

    #[test]
    fn gaussian_examples() {
        let data = make_gaussian_dataset(1000, 2, 2, 4.0, 3).unwrap();
        assert!(nearest_mean_accuracy(&data, 4.0) >= 0.95);
        assert_eq!(data.labels().iter().filter(|&&y| y == 0).count(), 500);

        let flat = make_gaussian_dataset(4000, 3, 4, 0.0, 3).unwrap();
        let acc = nearest_mean_accuracy(&flat, 0.0);
        assert!((acc - 0.25).abs() <= 0.05);

        assert_eq!(
            make_gaussian_dataset(100, 4, 3, 2.0, 9).unwrap(),
            make_gaussian_dataset(100, 4, 3, 2.0, 9).unwrap()
        );
        assert!(make_gaussian_dataset(100, 1, 3, 2.0, 9).is_err());
        assert!(make_gaussian_dataset(2, 4, 3, 2.0, 9).is_err());
    }

    #[test]
    fn means_have_requested_spacing() {
        for (d, k) in [(10, 4), (2, 5)] {
            let m = class_means(d, k, 3.5);
            let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(u, v)| (u - v).powi(2)).sum::<f64>().sqrt();
            assert!((dist(&m[0], &m[1]) - 3.5).abs() < 1e-12);
        }
    }

    #[test]
    fn presets_match_group_lists() {
        let mid = preset("idn-mid-r5").unwrap();
        let rates: Vec<f64> = mid.iter().map(|a| a.target_rate).collect();
        assert_eq!(rates, vec![0.3, 0.3, 0.4, 0.4, 0.5]);
        assert_eq!(preset("idn-low-r100").unwrap().len(), 100);
        assert_eq!(preset("idn-high-r30").unwrap().iter().filter(|a| a.target_rate == 0.7).count(), 8);
        assert!(preset("idn-mid-r7").is_err());
        assert!(preset("mid").is_err());
        assert_eq!(preset_names().len(), 18);
    }

    #[test]
    fn noiseless_annotators_copy_truth() {
        let data = make_gaussian_dataset(300, 3, 3, 2.0, 1).unwrap();
        let quiet: Vec<_> = (0..3).map(|s| AnnotatorSpec::new(0.0, s).unwrap()).collect();
        let ds = annotate(&data, &quiet, 2, 5).unwrap();
        assert_eq!(realized_noise_rate(&ds), Some(0.0));
        let full = annotate(&data, &quiet, 3, 5).unwrap();
        assert!((0..300).all(|i| full.annotations_of(i).len() == 3));
        assert!(annotate(&data, &quiet, 4, 5).is_err());
    }

    #[test]
    fn per_annotator_rates_near_target() {
        let specs: Vec<_> = [0.1, 0.3, 0.5, 0.7]
            .iter()
            .enumerate()
            .map(|(i, &t)| AnnotatorSpec::new(t, i as u64).unwrap())
            .collect();
        for (a, spec) in specs.iter().enumerate() {
            let mut total = 0.0;
            for seed in 0..5 {
                let data = make_gaussian_dataset(5000, 10, 4, 3.5, seed).unwrap();
                let ds = annotate(&data, &specs, specs.len(), seed).unwrap();
                let truth = ds.true_labels().unwrap();
                let mine: Vec<_> = ds.annotations().iter().filter(|x| x.annotator == a).collect();
                total += mine.iter().filter(|x| x.label != truth[x.instance]).count() as f64
                    / mine.len() as f64;
            }
            let rate = total / 5.0;
            assert!((rate - spec.target_rate).abs() <= 0.05, "annotator {a}: {rate}");
        }
    }

    #[test]
    fn idn_mid_overall_rate() {
        let data = make_gaussian_dataset(10_000, 10, 4, 3.5, 21).unwrap();
        let specs = preset("idn-mid-r5").unwrap();
        let ds = annotate(&data, &specs, 1, 21).unwrap();
        assert_eq!(ds.annotations().len(), 10_000);
        // Uniform annotator selection: the expected rate is the mean target.
        let expected = specs.iter().map(|a| a.target_rate).sum::<f64>() / specs.len() as f64;
        assert!((expected - 0.38).abs() < 1e-12);
        let rate = realized_noise_rate(&ds).unwrap();
        assert!((rate - expected).abs() <= 0.03, "{rate}");
    }

    #[test]
    fn noise_depends_on_instance() {
        let data = make_gaussian_dataset(5000, 10, 4, 3.5, 2).unwrap();
        for (s, tau) in [(0, 0.3), (1, 0.5)] {
            let spec = AnnotatorSpec::new(tau, s).unwrap();
            let mut q = flip_probabilities(&data, &spec, 2);
            q.sort_by(f64::total_cmp);
            let dec = q.len() / 10;
            let bottom = q[..dec].iter().sum::<f64>() / dec as f64;
            let top = q[q.len() - dec..].iter().sum::<f64>() / dec as f64;
            assert!(top - bottom >= 0.05, "{top} vs {bottom}");
            let mean = q.iter().sum::<f64>() / q.len() as f64;
            assert!((mean - tau).abs() <= 0.05);
        }
    }

    #[test]
    fn annotate_is_deterministic() {
        let data = make_gaussian_dataset(500, 4, 3, 2.0, 8).unwrap();
        let specs = preset("idn-high-r10").unwrap();
        let a = annotate(&data, &specs, 2, 99).unwrap();
        let b = annotate(&data, &specs, 2, 99).unwrap();
        assert_eq!(a.annotations(), b.annotations());
        let c = annotate(&data, &specs, 2, 100).unwrap();
        assert_ne!(a.annotations(), c.annotations());
    }

    #[test]
    fn class_conditional_matches_diagonal() {
        let data = make_gaussian_dataset(4000, 2, 2, 1.0, 4).unwrap();
        let conf = ConfusionModel::symmetric(3, 2, 0.8).unwrap();
        let ds = annotate_class_conditional(&data, &conf, 3, 4).unwrap();
        let rate = realized_noise_rate(&ds).unwrap();
        assert!((rate - 0.2).abs() < 0.02);
    }
}
