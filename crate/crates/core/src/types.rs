//! Domain types shared by every module: label spaces, categorical
//! distributions, the robust loss specification and annotated datasets.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on the total mass of a [`CategoricalDist`].
pub const SUM_TOLERANCE: f64 = 1e-9;

/// Lower clip bound applied inside [`Transform::ClippedNegLog`].
pub const CLIP_LO: f64 = 0.01;
/// Upper clip bound applied inside [`Transform::ClippedNegLog`].
pub const CLIP_HI: f64 = 0.99;

/// The finite label space `{0, .., k-1}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSpace {
    k: usize,
}

impl LabelSpace {
    pub fn new(k: usize) -> Result<Self> {
        if k < 2 {
            return Err(Error::InvalidDataset(format!(
                "label space needs at least two classes, got {k}"
            )));
        }
        Ok(Self { k })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn check(&self, label: usize) -> Result<()> {
        if label < self.k {
            Ok(())
        } else {
            Err(Error::LabelOutOfRange { label, k: self.k })
        }
    }
}

/// A probability vector over `K` classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct CategoricalDist {
    probs: Vec<f64>,
}

impl CategoricalDist {
    /// Validates that every entry lies in `[0, 1]` and the entries sum to one.
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.len() < 2 {
            return Err(Error::InvalidDistribution(format!(
                "need at least two classes, got {}",
                probs.len()
            )));
        }
        if let Some(bad) = probs
            .iter()
            .find(|p| !p.is_finite() || **p < 0.0 || **p > 1.0)
        {
            return Err(Error::InvalidDistribution(format!(
                "entry {bad} outside [0, 1]"
            )));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > SUM_TOLERANCE {
            return Err(Error::InvalidDistribution(format!(
                "entries sum to {total}"
            )));
        }
        Ok(Self { probs })
    }

    /// Normalizes nonnegative weights into a distribution.
    pub fn from_weights(weights: &[f64]) -> Result<Self> {
        let total: f64 = weights.iter().sum();
        if !(total.is_finite() && total > 0.0) || weights.iter().any(|w| *w < 0.0) {
            return Err(Error::InvalidDistribution(format!(
                "weights cannot be normalized (total {total})"
            )));
        }
        Self::new(weights.iter().map(|w| w / total).collect())
    }

    pub fn uniform(k: usize) -> Self {
        Self {
            probs: vec![1.0 / k as f64; k],
        }
    }

    pub fn point_mass(k: usize, label: usize) -> Self {
        let mut probs = vec![0.0; k];
        probs[label] = 1.0;
        Self { probs }
    }

    pub fn k(&self) -> usize {
        self.probs.len()
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn get(&self, j: usize) -> f64 {
        self.probs[j]
    }

    /// Index of the largest entry; ties go to the smallest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (j, p) in self.probs.iter().enumerate().skip(1) {
            if *p > self.probs[best] {
                best = j;
            }
        }
        best
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.probs
    }
}

impl TryFrom<Vec<f64>> for CategoricalDist {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<CategoricalDist> for Vec<f64> {
    fn from(d: CategoricalDist) -> Self {
        d.probs
    }
}

/// Curvature class of a loss transform on `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Curvature {
    /// Affine; both concave and convex.
    Linear,
    Concave,
    Convex,
}

/// A bounded, decreasing transform `T` such that the per-class loss is
/// `T(prob of the class)`.
pub trait LossTransform {
    fn value(&self, t: f64) -> f64;
    fn derivative(&self, t: f64) -> f64;
    fn curvature(&self) -> Curvature;
}

/// Transforms available for training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Transform {
    /// `T(t) = 1 - t`.
    Linear,
    /// `T(t) = -log(clip(t, 0.01, 0.99))`.
    ClippedNegLog,
}

impl LossTransform for Transform {
    fn value(&self, t: f64) -> f64 {
        match self {
            Transform::Linear => 1.0 - t,
            Transform::ClippedNegLog => -t.clamp(CLIP_LO, CLIP_HI).ln(),
        }
    }

    /// For the clipped transform the smooth branch's derivative is evaluated
    /// at the clipped point, so `T'(0) = -100` and `T'(1) = -1/0.99`.
    fn derivative(&self, t: f64) -> f64 {
        match self {
            Transform::Linear => -1.0,
            Transform::ClippedNegLog => -1.0 / t.clamp(CLIP_LO, CLIP_HI),
        }
    }

    fn curvature(&self) -> Curvature {
        match self {
            Transform::Linear => Curvature::Linear,
            Transform::ClippedNegLog => Curvature::Convex,
        }
    }
}

impl std::str::FromStr for Transform {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Transform::Linear),
            "clipped-neg-log" | "ce" | "cross-entropy" => Ok(Transform::ClippedNegLog),
            other => Err(Error::Config(format!("unknown transform `{other}`"))),
        }
    }
}

/// Loss transform plus the Wasserstein ball geometry: order `p`, cost scale
/// `kappa` (cost is `kappa * 1(y != y')`) and radius `epsilon`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RobustLossSpec {
    pub transform: Transform,
    pub p: f64,
    pub kappa: f64,
    pub epsilon: f64,
}

impl RobustLossSpec {
    pub fn new(transform: Transform, p: f64, kappa: f64, epsilon: f64) -> Result<Self> {
        let spec = Self {
            transform,
            p,
            kappa,
            epsilon,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.p.is_finite() && self.p >= 1.0) {
            return Err(Error::InvalidSpec(format!("order p = {} must be >= 1", self.p)));
        }
        if !(self.kappa.is_finite() && self.kappa > 0.0) {
            return Err(Error::InvalidSpec(format!("kappa = {} must be > 0", self.kappa)));
        }
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return Err(Error::InvalidSpec(format!(
                "epsilon = {} must be > 0",
                self.epsilon
            )));
        }
        let rho = self.rho();
        if !(rho.is_finite() && rho > 0.0) {
            return Err(Error::InvalidSpec(format!("radius rho = {rho} is degenerate")));
        }
        Ok(())
    }

    /// Training additionally requires `epsilon < 1/K`.
    pub fn validate_for_training(&self, k: usize) -> Result<()> {
        self.validate()?;
        if self.epsilon >= 1.0 / k as f64 {
            return Err(Error::InvalidSpec(format!(
                "epsilon = {} must lie in (0, 1/K) = (0, {})",
                self.epsilon,
                1.0 / k as f64
            )));
        }
        Ok(())
    }

    /// `epsilon^p / kappa^p`, the radius in units of the discrete cost.
    pub fn rho(&self) -> f64 {
        (self.epsilon / self.kappa).powf(self.p)
    }

    pub fn epsilon_p(&self) -> f64 {
        self.epsilon.powf(self.p)
    }

    pub fn kappa_p(&self) -> f64 {
        self.kappa.powf(self.p)
    }

    /// Loss of predicting `pred` when the label is `label`.
    pub fn loss_value(&self, pred: &CategoricalDist, label: usize) -> Result<f64> {
        if label >= pred.k() {
            return Err(Error::LabelOutOfRange {
                label,
                k: pred.k(),
            });
        }
        Ok(self.transform.value(pred.get(label)))
    }

    /// Loss vector `(T(pred_0), .., T(pred_{K-1}))`.
    pub fn loss_vector(&self, pred: &CategoricalDist) -> Vec<f64> {
        pred.probs().iter().map(|p| self.transform.value(*p)).collect()
    }
}

impl Default for RobustLossSpec {
    fn default() -> Self {
        Self {
            transform: Transform::ClippedNegLog,
            p: 1.0,
            kappa: 1.0,
            epsilon: 0.1,
        }
    }
}

/// `rho(spec) = epsilon^p / kappa^p`.
pub fn rho(spec: &RobustLossSpec) -> f64 {
    spec.rho()
}

/// One label reported by one annotator for one instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Annotation {
    pub instance: usize,
    pub annotator: usize,
    pub label: usize,
}

/// Features, sparse crowdsourced annotations and optional ground truth.
#[derive(Debug, Clone)]
pub struct AnnotationDataset {
    features: Vec<f64>,
    n: usize,
    d: usize,
    k: usize,
    r: usize,
    annotations: Vec<Annotation>,
    by_instance: Vec<Vec<(usize, usize)>>,
    true_labels: Option<Vec<usize>>,
}

impl AnnotationDataset {
    /// `features` is row-major `n x d`. Every instance needs at least one
    /// annotation and each (instance, annotator) pair may appear once.
    pub fn new(
        features: Vec<f64>,
        d: usize,
        k: usize,
        r: usize,
        annotations: Vec<Annotation>,
        true_labels: Option<Vec<usize>>,
    ) -> Result<Self> {
        LabelSpace::new(k)?;
        if d == 0 || features.len() % d != 0 {
            return Err(Error::InvalidDataset(format!(
                "{} feature values do not form rows of width {d}",
                features.len()
            )));
        }
        let n = features.len() / d;
        if n == 0 {
            return Err(Error::EmptyInput("dataset has no instances"));
        }
        if r == 0 {
            return Err(Error::InvalidDataset("no annotators".into()));
        }
        let mut by_instance: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n];
        for a in &annotations {
            if a.instance >= n {
                return Err(Error::InvalidDataset(format!(
                    "annotation for instance {} but n = {n}",
                    a.instance
                )));
            }
            if a.annotator >= r {
                return Err(Error::InvalidDataset(format!(
                    "annotator {} out of range (R = {r})",
                    a.annotator
                )));
            }
            if a.label >= k {
                return Err(Error::LabelOutOfRange { label: a.label, k });
            }
            let row = &mut by_instance[a.instance];
            if row.iter().any(|(ann, _)| *ann == a.annotator) {
                return Err(Error::InvalidDataset(format!(
                    "annotator {} labels instance {} twice",
                    a.annotator, a.instance
                )));
            }
            row.push((a.annotator, a.label));
        }
        if let Some(i) = by_instance.iter().position(|v| v.is_empty()) {
            return Err(Error::InvalidDataset(format!(
                "instance {i} has no annotations"
            )));
        }
        if let Some(t) = &true_labels {
            if t.len() != n {
                return Err(Error::LengthMismatch {
                    left: t.len(),
                    right: n,
                });
            }
            if let Some(bad) = t.iter().find(|l| **l >= k) {
                return Err(Error::LabelOutOfRange { label: *bad, k });
            }
        }
        Ok(Self {
            features,
            n,
            d,
            k,
            r,
            annotations,
            by_instance,
            true_labels,
        })
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

    pub fn r(&self) -> usize {
        self.r
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.d..(i + 1) * self.d]
    }

    pub fn annotations(&self) -> &[Annotation] {
        &self.annotations
    }

    /// `(annotator, label)` pairs for instance `i`, in input order.
    pub fn annotations_of(&self, i: usize) -> &[(usize, usize)] {
        &self.by_instance[i]
    }

    pub fn true_labels(&self) -> Option<&[usize]> {
        self.true_labels.as_deref()
    }

    /// Restricts to the given instances, renumbering them `0..indices.len()`.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let mut features = Vec::with_capacity(indices.len() * self.d);
        let mut annotations = Vec::new();
        for (new_i, &i) in indices.iter().enumerate() {
            features.extend_from_slice(self.row(i));
            annotations.extend(self.by_instance[i].iter().map(|&(annotator, label)| {
                Annotation {
                    instance: new_i,
                    annotator,
                    label,
                }
            }));
        }
        let truth = self
            .true_labels
            .as_ref()
            .map(|t| indices.iter().map(|&i| t[i]).collect());
        Self::new(features, self.d, self.k, self.r, annotations, truth)
    }
}
