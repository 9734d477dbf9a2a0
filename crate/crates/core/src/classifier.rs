//! Softmax classifiers with hand-written gradients for the nominal and the
//! fixed-multiplier robust loss.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{CategoricalDist, LossTransform, RobustLossSpec, Transform, CLIP_HI, CLIP_LO};
use crate::wasserstein_dual::inner_sup_from_losses;

const CHECKPOINT_MAGIC: &str = "cdro-model 1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Architecture {
    Linear,
    /// One `tanh` hidden layer.
    Mlp { hidden: usize },
}

impl FromStr for Architecture {
    type Err = Error;

    /// Accepts `linear`, `mlp` (32 hidden units) or `mlp:<h>`.
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Self::Linear),
            "mlp" => Ok(Self::Mlp { hidden: 32 }),
            _ => s
                .strip_prefix("mlp:")
                .and_then(|h| h.parse().ok())
                .filter(|h| *h > 0)
                .map(|hidden| Self::Mlp { hidden })
                .ok_or_else(|| Error::Config(format!("unknown architecture `{s}`"))),
        }
    }
}

/// Model with all parameters in one flat vector.
///
/// Linear layout: `W (k x d)`, `b (k)`. MLP layout: `W1 (h x d)`, `b1 (h)`,
/// `W2 (k x h)`, `b2 (k)`; matrices are row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxModel {
    arch: Architecture,
    d: usize,
    k: usize,
    params: Vec<f64>,
}

fn param_count(arch: Architecture, d: usize, k: usize) -> usize {
    match arch {
        Architecture::Linear => k * d + k,
        Architecture::Mlp { hidden: h } => h * d + h + k * h + k,
    }
}

impl SoftmaxModel {
    pub fn zeros(arch: Architecture, d: usize, k: usize) -> Self {
        Self {
            arch,
            d,
            k,
            params: vec![0.0; param_count(arch, d, k)],
        }
    }

    /// Weights drawn from `N(0, 1 / fan_in)`, biases zero.
    pub fn init<R: Rng + ?Sized>(arch: Architecture, d: usize, k: usize, rng: &mut R) -> Self {
        let mut m = Self::zeros(arch, d, k);
        let mut fill = |slice: &mut [f64], fan_in: usize| {
            let s = 1.0 / (fan_in as f64).sqrt();
            for w in slice {
                let z: f64 = StandardNormal.sample(rng);
                *w = s * z;
            }
        };
        match arch {
            Architecture::Linear => fill(&mut m.params[..k * d], d),
            Architecture::Mlp { hidden: h } => {
                fill(&mut m.params[..h * d], d);
                let w2 = h * d + h;
                fill(&mut m.params[w2..w2 + k * h], h);
            }
        }
        m
    }

    pub fn from_params(arch: Architecture, d: usize, k: usize, params: Vec<f64>) -> Result<Self> {
        let expected = param_count(arch, d, k);
        if params.len() != expected {
            return Err(Error::DimensionMismatch { expected, actual: params.len() });
        }
        Ok(Self { arch, d, k, params })
    }

    pub fn architecture(&self) -> Architecture {
        self.arch
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.d {
            return Err(Error::DimensionMismatch { expected: self.d, actual: x.len() });
        }
        Ok(())
    }

    /// Hidden activations (empty for the linear model) and logits.
    fn forward(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let (d, k, p) = (self.d, self.k, &self.params);
        match self.arch {
            Architecture::Linear => {
                let logits = (0..k)
                    .map(|c| dot(&p[c * d..(c + 1) * d], x) + p[k * d + c])
                    .collect();
                (Vec::new(), logits)
            }
            Architecture::Mlp { hidden: h } => {
                let hid: Vec<f64> = (0..h)
                    .map(|u| (dot(&p[u * d..(u + 1) * d], x) + p[h * d + u]).tanh())
                    .collect();
                let w2 = h * d + h;
                let b2 = w2 + k * h;
                let logits = (0..k)
                    .map(|c| dot(&p[w2 + c * h..w2 + (c + 1) * h], &hid) + p[b2 + c])
                    .collect();
                (hid, logits)
            }
        }
    }

    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(x)?;
        Ok(self.forward(x).1)
    }

    /// Class probabilities without the distribution wrapper.
    pub fn probs(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(x)?;
        Ok(softmax(&self.forward(x).1))
    }

    pub fn predict(&self, x: &[f64]) -> Result<CategoricalDist> {
        CategoricalDist::new(self.probs(x)?)
    }

    pub fn predict_class(&self, x: &[f64]) -> Result<usize> {
        Ok(argmax(&self.probs(x)?))
    }

    /// Accumulates `dL/dparams` into `grad` given `dL/dlogits`.
    fn backward(&self, x: &[f64], hid: &[f64], dz: &[f64], grad: &mut [f64]) {
        let (d, k, p) = (self.d, self.k, &self.params);
        match self.arch {
            Architecture::Linear => {
                for c in 0..k {
                    axpy(dz[c], x, &mut grad[c * d..(c + 1) * d]);
                    grad[k * d + c] += dz[c];
                }
            }
            Architecture::Mlp { hidden: h } => {
                let w2 = h * d + h;
                let b2 = w2 + k * h;
                let mut dh = vec![0.0; h];
                for c in 0..k {
                    axpy(dz[c], hid, &mut grad[w2 + c * h..w2 + (c + 1) * h]);
                    grad[b2 + c] += dz[c];
                    axpy(dz[c], &p[w2 + c * h..w2 + (c + 1) * h], &mut dh);
                }
                for u in 0..h {
                    let da = dh[u] * (1.0 - hid[u] * hid[u]);
                    axpy(da, x, &mut grad[u * d..(u + 1) * d]);
                    grad[h * d + u] += da;
                }
            }
        }
    }

    /// Text checkpoint: a magic line, `arch linear|mlp`, `dims d h k`
    /// (`h = 0` for linear), `params N`, then one value per line.
    pub fn to_checkpoint(&self) -> String {
        let (name, h) = match self.arch {
            Architecture::Linear => ("linear", 0),
            Architecture::Mlp { hidden } => ("mlp", hidden),
        };
        let mut out = format!(
            "{CHECKPOINT_MAGIC}\narch {name}\ndims {} {h} {}\nparams {}\n",
            self.d,
            self.k,
            self.params.len()
        );
        for v in &self.params {
            let _ = writeln!(out, "{v}");
        }
        out
    }

    pub fn from_checkpoint(text: &str) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        let mut lines = text.lines();
        if lines.next() != Some(CHECKPOINT_MAGIC) {
            return Err(bad("missing or unsupported header"));
        }
        let arch_name = lines
            .next()
            .and_then(|l| l.strip_prefix("arch "))
            .ok_or_else(|| bad("missing arch line"))?;
        let dims: Vec<usize> = lines
            .next()
            .and_then(|l| l.strip_prefix("dims "))
            .ok_or_else(|| bad("missing dims line"))?
            .split_whitespace()
            .map(|t| t.parse().map_err(|_| bad("bad dims")))
            .collect::<Result<_>>()?;
        let [d, h, k] = dims[..] else {
            return Err(bad("dims needs three values"));
        };
        let arch = match arch_name {
            "linear" => Architecture::Linear,
            "mlp" if h > 0 => Architecture::Mlp { hidden: h },
            _ => return Err(bad("unknown architecture")),
        };
        let count: usize = lines
            .next()
            .and_then(|l| l.strip_prefix("params "))
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| bad("missing params line"))?;
        let params: Vec<f64> = lines
            .filter(|l| !l.trim().is_empty())
            .map(|l| l.trim().parse().map_err(|_| bad("bad parameter value")))
            .collect::<Result<_>>()?;
        if params.len() != count {
            return Err(bad("parameter count does not match header"));
        }
        Self::from_params(arch, d, k, params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(std::fs::write(path, self.to_checkpoint())?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&std::fs::read_to_string(path)?)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Max-shifted softmax.
pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// Derivative of `t -> T(t)` as a function, which is zero on the flat
/// parts of the clipped log.
fn transform_slope(transform: Transform, t: f64) -> f64 {
    match transform {
        Transform::Linear => -1.0,
        Transform::ClippedNegLog => {
            if t < CLIP_LO || t > CLIP_HI {
                0.0
            } else {
                -1.0 / t
            }
        }
    }
}

/// `dL/dz = psi * (g - <g, psi>)` for `L` with `dL/dpsi = g`.
fn softmax_backward(psi: &[f64], g: &[f64]) -> Vec<f64> {
    let inner = dot(g, psi);
    psi.iter().zip(g).map(|(p, gi)| p * (gi - inner)).collect()
}

fn check_batch(model: &SoftmaxModel, xs: &[&[f64]], refs: &[CategoricalDist]) -> Result<()> {
    if xs.len() != refs.len() {
        return Err(Error::LengthMismatch { left: xs.len(), right: refs.len() });
    }
    for r in refs {
        if r.k() != model.k {
            return Err(Error::DimensionMismatch { expected: model.k, actual: r.k() });
        }
    }
    Ok(())
}

/// Mean fixed-`gamma` dual objective over the batch and its gradient.
///
/// For each reference label the inner maximizer is held fixed (smallest
/// index on ties), which gives a Danskin subgradient at kinks. An empty
/// batch has loss 0 and zero gradient.
pub fn robust_batch_gradient(
    model: &SoftmaxModel,
    xs: &[&[f64]],
    refs: &[CategoricalDist],
    spec: &RobustLossSpec,
    gamma: f64,
) -> Result<(f64, Vec<f64>)> {
    if gamma.is_nan() || gamma < 0.0 {
        return Err(Error::NegativeGamma(gamma));
    }
    check_batch(model, xs, refs)?;
    let mut grad = vec![0.0; model.params.len()];
    if xs.is_empty() {
        return Ok((0.0, grad));
    }
    let penalty = gamma * spec.kappa_p();
    let mut total = 0.0;
    for (x, r) in xs.iter().zip(refs) {
        model.check_dim(x)?;
        let (hid, z) = model.forward(x);
        let psi = softmax(&z);
        let losses: Vec<f64> = psi.iter().map(|p| spec.transform.value(*p)).collect();
        let mut g = vec![0.0; model.k];
        total += gamma * spec.epsilon_p();
        for (j, pj) in r.probs().iter().enumerate() {
            if *pj == 0.0 {
                continue;
            }
            let (v, y) = inner_sup_from_losses(&losses, j, penalty);
            total += pj * v;
            g[y] += pj * transform_slope(spec.transform, psi[y]);
        }
        model.backward(x, &hid, &softmax_backward(&psi, &g), &mut grad);
    }
    let n = xs.len() as f64;
    grad.iter_mut().for_each(|v| *v /= n);
    Ok((total / n, grad))
}

/// Mean nominal loss `sum_j P_j T(psi_j)` and its gradient.
pub fn nominal_batch_gradient(
    model: &SoftmaxModel,
    xs: &[&[f64]],
    refs: &[CategoricalDist],
    transform: Transform,
) -> Result<(f64, Vec<f64>)> {
    check_batch(model, xs, refs)?;
    let mut grad = vec![0.0; model.params.len()];
    if xs.is_empty() {
        return Ok((0.0, grad));
    }
    let mut total = 0.0;
    for (x, r) in xs.iter().zip(refs) {
        model.check_dim(x)?;
        let (hid, z) = model.forward(x);
        let psi = softmax(&z);
        let g: Vec<f64> = r
            .probs()
            .iter()
            .zip(&psi)
            .map(|(pj, p)| {
                total += pj * transform.value(*p);
                pj * transform_slope(transform, *p)
            })
            .collect();
        model.backward(x, &hid, &softmax_backward(&psi, &g), &mut grad);
    }
    let n = xs.len() as f64;
    grad.iter_mut().for_each(|v| *v /= n);
    Ok((total / n, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum OptimizerKind {
    Sgd { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        Self::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First-order optimizer with its moment buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    weight_decay: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, weight_decay: f64) -> Result<Self> {
        if !(lr >= 0.0) || !(weight_decay >= 0.0) {
            return Err(Error::Config(format!(
                "learning rate and weight decay must be nonnegative (lr={lr}, wd={weight_decay})"
            )));
        }
        Ok(Self { kind, lr, weight_decay, m: Vec::new(), v: Vec::new(), t: 0 })
    }

    pub fn learning_rate(&self) -> f64 {
        self.lr
    }

    /// One update of `params` along `grad`. Weight decay is added to the
    /// gradient (L2 penalty).
    pub fn step_params(&mut self, params: &mut [f64], grad: &[f64]) {
        if self.m.len() != params.len() {
            self.m = vec![0.0; params.len()];
            self.v = vec![0.0; params.len()];
            self.t = 0;
        }
        self.t += 1;
        match self.kind {
            OptimizerKind::Sgd { momentum } => {
                for ((w, g), m) in params.iter_mut().zip(grad).zip(&mut self.m) {
                    let g = g + self.weight_decay * *w;
                    *m = momentum * *m + g;
                    *w -= self.lr * *m;
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let c1 = 1.0 - beta1.powi(self.t as i32);
                let c2 = 1.0 - beta2.powi(self.t as i32);
                for (((w, g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
                    let g = g + self.weight_decay * *w;
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    *w -= self.lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                }
            }
        }
    }

    pub fn step(&mut self, model: &mut SoftmaxModel, grad: &[f64]) {
        self.step_params(&mut model.params, grad);
    }
}

/// Fraction of rows whose predicted class equals the label.
pub fn accuracy(model: &SoftmaxModel, rows: &[&[f64]], labels: &[usize]) -> Result<f64> {
    if rows.len() != labels.len() {
        return Err(Error::LengthMismatch { left: rows.len(), right: labels.len() });
    }
    if rows.is_empty() {
        return Err(Error::EmptyInput("accuracy of an empty set"));
    }
    let mut hits = 0;
    for (x, y) in rows.iter().zip(labels) {
        if model.predict_class(x)? == *y {
            hits += 1;
        }
    }
    Ok(hits as f64 / rows.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn spec(t: Transform, eps: f64) -> RobustLossSpec {
        RobustLossSpec::new(t, 1.0, 1.0, eps).unwrap()
    }

    fn random_batch(rng: &mut ChaCha8Rng, n: usize, d: usize, k: usize) -> (Vec<Vec<f64>>, Vec<CategoricalDist>) {
        let xs = (0..n).map(|_| (0..d).map(|_| rng.random_range(-1.5..1.5)).collect()).collect();
        let refs = (0..n)
            .map(|_| {
                let w: Vec<f64> = (0..k).map(|_| rng.random::<f64>()).collect();
                CategoricalDist::from_weights(&w).unwrap()
            })
            .collect();
        (xs, refs)
    }

    fn central_difference(f: impl Fn(&SoftmaxModel) -> f64, model: &SoftmaxModel, h: f64) -> Vec<f64> {
        (0..model.params.len())
            .map(|i| {
                let mut up = model.clone();
                up.params[i] += h;
                let mut down = model.clone();
                down.params[i] -= h;
                (f(&up) - f(&down)) / (2.0 * h)
            })
            .collect()
    }

    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let diff = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        let scale = a.iter().chain(b).map(|x| x.abs()).fold(1e-8, f64::max);
        diff / scale
    }

    #[test]
    fn predict_examples() {
        let m = SoftmaxModel::zeros(Architecture::Mlp { hidden: 4 }, 3, 5);
        assert_eq!(m.predict(&[1.0, -2.0, 0.5]).unwrap(), CategoricalDist::uniform(5));

        let mut lin = SoftmaxModel::zeros(Architecture::Linear, 1, 2);
        lin.params_mut()[0] = 1000.0;
        let p = lin.predict(&[1.0]).unwrap();
        assert!((p.get(0) - 1.0).abs() < 1e-12 && p.get(1) < 1e-300);
        assert!(lin.predict(&[1.0, 2.0]).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = SoftmaxModel::init(Architecture::Mlp { hidden: 8 }, 4, 3, &mut rng);
        for _ in 0..50 {
            let x: Vec<f64> = (0..4).map(|_| rng.random_range(-20.0..20.0)).collect();
            let s: f64 = m.probs(&x).unwrap().iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            assert_eq!(m.probs(&x).unwrap(), m.probs(&x).unwrap());
        }
    }

    #[test]
    fn robust_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for arch in [Architecture::Linear, Architecture::Mlp { hidden: 6 }] {
            for t in [Transform::Linear, Transform::ClippedNegLog] {
                let model = SoftmaxModel::init(arch, 4, 3, &mut rng);
                let (xs, refs) = random_batch(&mut rng, 5, 4, 3);
                let rows: Vec<&[f64]> = xs.iter().map(Vec::as_slice).collect();
                let s = spec(t, 0.2);
                let gamma = 0.37;
                let (_, g) = robust_batch_gradient(&model, &rows, &refs, &s, gamma).unwrap();
                let numeric = central_difference(
                    |m| robust_batch_gradient(m, &rows, &refs, &s, gamma).unwrap().0,
                    &model,
                    1e-5,
                );
                assert!(rel_err(&g, &numeric) < 1e-4, "{arch:?} {t:?}");
            }
        }
    }

    #[test]
    fn large_gamma_reduces_to_nominal() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model = SoftmaxModel::init(Architecture::Linear, 3, 4, &mut rng);
        let (xs, refs) = random_batch(&mut rng, 6, 3, 4);
        let rows: Vec<&[f64]> = xs.iter().map(Vec::as_slice).collect();
        for t in [Transform::Linear, Transform::ClippedNegLog] {
            let s = spec(t, 0.1);
            let (_, robust) = robust_batch_gradient(&model, &rows, &refs, &s, 1e3).unwrap();
            let (_, nominal) = nominal_batch_gradient(&model, &rows, &refs, t).unwrap();
            assert!(rel_err(&robust, &nominal) < 1e-12);
        }
    }

    #[test]
    fn empty_batch_is_zero() {
        let model = SoftmaxModel::zeros(Architecture::Linear, 2, 3);
        let (l, g) = robust_batch_gradient(&model, &[], &[], &spec(Transform::Linear, 0.1), 1.0).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.iter().all(|v| *v == 0.0));
        assert!(robust_batch_gradient(&model, &[], &[], &spec(Transform::Linear, 0.1), -1.0).is_err());
    }

    #[test]
    fn optimizer_examples() {
        let mut w = [1.0];
        let mut sgd = Optimizer::new(OptimizerKind::Sgd { momentum: 0.0 }, 0.1, 0.0).unwrap();
        sgd.step_params(&mut w, &[2.0 * 1.0]);
        assert!((w[0] - 0.8).abs() < 1e-15);

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let model = SoftmaxModel::init(Architecture::Linear, 3, 2, &mut rng);
        for kind in [OptimizerKind::Sgd { momentum: 0.9 }, OptimizerKind::adam()] {
            let mut still = model.clone();
            let mut opt = Optimizer::new(kind, 0.0, 0.0).unwrap();
            opt.step(&mut still, &vec![1.0; model.params().len()]);
            assert_eq!(still, model);
        }

        let mut adam = Optimizer::new(OptimizerKind::adam(), 0.01, 0.0).unwrap();
        let mut w = [0.0];
        let mut last = 0.0;
        for _ in 0..5000 {
            let before = w[0];
            adam.step_params(&mut w, &[3.0]);
            last = before - w[0];
        }
        assert!((last - 0.01).abs() < 1e-6);
    }

    #[test]
    fn robust_descent_reduces_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut model = SoftmaxModel::init(Architecture::Mlp { hidden: 8 }, 4, 3, &mut rng);
        let (xs, _) = random_batch(&mut rng, 16, 4, 3);
        let refs: Vec<_> = (0..16).map(|i| CategoricalDist::point_mass(3, i % 3)).collect();
        let rows: Vec<&[f64]> = xs.iter().map(Vec::as_slice).collect();
        let s = spec(Transform::ClippedNegLog, 0.2);
        let start = robust_batch_gradient(&model, &rows, &refs, &s, 0.5).unwrap().0;
        let mut opt = Optimizer::new(OptimizerKind::Sgd { momentum: 0.0 }, 0.1, 0.0).unwrap();
        for _ in 0..200 {
            let (_, g) = robust_batch_gradient(&model, &rows, &refs, &s, 0.5).unwrap();
            opt.step(&mut model, &g);
        }
        let end = robust_batch_gradient(&model, &rows, &refs, &s, 0.5).unwrap().0;
        assert!(start - end >= 1e-4, "{start} -> {end}");
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for arch in [Architecture::Linear, Architecture::Mlp { hidden: 5 }] {
            let m = SoftmaxModel::init(arch, 3, 4, &mut rng);
            let text = m.to_checkpoint();
            assert!(text.starts_with("cdro-model 1\n"));
            assert_eq!(SoftmaxModel::from_checkpoint(&text).unwrap(), m);
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("m.txt");
            m.save(&path).unwrap();
            assert_eq!(SoftmaxModel::load(&path).unwrap(), m);
        }
        assert!(SoftmaxModel::from_checkpoint("cdro-model 2\n").is_err());
        let truncated = "cdro-model 1\narch linear\ndims 1 0 2\nparams 4\n0\n0\n";
        assert!(SoftmaxModel::from_checkpoint(truncated).is_err());
    }

    #[test]
    fn architecture_parsing() {
        assert_eq!("linear".parse::<Architecture>().unwrap(), Architecture::Linear);
        assert_eq!("mlp".parse::<Architecture>().unwrap(), Architecture::Mlp { hidden: 32 });
        assert_eq!("mlp:7".parse::<Architecture>().unwrap(), Architecture::Mlp { hidden: 7 });
        assert!("mlp:0".parse::<Architecture>().is_err());
    }

    proptest::proptest! {
        #[test]
        fn predict_is_deterministic_and_normalized(
            seed in 0u64..1000,
            x in proptest::collection::vec(-5.0f64..5.0, 4),
            mlp in proptest::bool::ANY,
        ) {
            let arch = if mlp { Architecture::Mlp { hidden: 6 } } else { Architecture::Linear };
            let a = SoftmaxModel::init(arch, 4, 3, &mut ChaCha8Rng::seed_from_u64(seed));
            let b = SoftmaxModel::init(arch, 4, 3, &mut ChaCha8Rng::seed_from_u64(seed));
            let pa = a.predict(&x).unwrap();
            proptest::prop_assert_eq!(&pa, &b.predict(&x).unwrap());
            proptest::prop_assert_eq!(&pa, &a.predict(&x).unwrap());
            proptest::prop_assert!((pa.probs().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
