//! The two-classifier robust training loop: warm-up on majority votes,
//! small-loss anchors, confusion estimation, then per-epoch posteriors,
//! likelihood-ratio pseudo-labels, cross-training and multiplier updates.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::classifier::{
    nominal_batch_gradient, robust_batch_gradient, Architecture, Optimizer, OptimizerKind,
    SoftmaxModel,
};
use crate::error::{Error, Result};
use crate::noise_sim::CleanDataset;
use crate::posterior::{bayes_posterior, estimate_confusions, majority_vote, ConfusionModel};
use crate::pseudo_label::build_pseudo_empirical;
use crate::types::{AnnotationDataset, CategoricalDist, RobustLossSpec, Transform};
use crate::wasserstein_dual::{closed_form_empirical_risk, gamma_one_step, inner_sup_from_losses};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Total epochs, warm-up included.
    pub epochs: usize,
    pub warmup_epochs: usize,
    /// Permits `warmup_epochs = 0`.
    pub allow_zero_warmup: bool,
    pub lrt_threshold: f64,
    pub lambda: f64,
    pub spec: RobustLossSpec,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub optimizer: OptimizerKind,
    pub batch_size: usize,
    pub architecture: Architecture,
    pub seed: u64,
    /// Initialization seeds of the two classifiers; derived from `seed`
    /// when absent.
    pub model_seeds: Option<[u64; 2]>,
    /// Anchor fraction; estimated from the warmed models when absent.
    pub small_loss_ratio: Option<f64>,
    pub confusion_smoothing: f64,
    /// Share of the training data held out for model selection.
    pub validation_fraction: f64,
    /// Use the soft posterior of selected instances as the reference
    /// instead of point masses.
    pub soft_reference: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            warmup_epochs: 10,
            allow_zero_warmup: false,
            lrt_threshold: 2.0,
            lambda: 10.0,
            spec: RobustLossSpec::default(),
            learning_rate: 5e-3,
            weight_decay: 1e-4,
            optimizer: OptimizerKind::adam(),
            batch_size: 64,
            architecture: Architecture::Mlp { hidden: 32 },
            seed: 0,
            model_seeds: None,
            small_loss_ratio: None,
            confusion_smoothing: 1.0,
            validation_fraction: 0.1,
            soft_reference: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, k: usize) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        self.spec.validate_for_training(k)?;
        if self.warmup_epochs >= self.epochs {
            return bad(format!(
                "warmup_epochs ({}) must be less than epochs ({})",
                self.warmup_epochs, self.epochs
            ));
        }
        if self.warmup_epochs == 0 && !self.allow_zero_warmup {
            return bad("warmup_epochs = 0 requires allow_zero_warmup".into());
        }
        if !(self.lrt_threshold > 1.0) {
            return Err(Error::InvalidThreshold(self.lrt_threshold));
        }
        if !(self.lambda > 0.0) || !self.lambda.is_finite() {
            return bad(format!("lambda must be positive, got {}", self.lambda));
        }
        if !(self.learning_rate > 0.0) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(self.weight_decay >= 0.0) {
            return bad(format!("weight_decay must be nonnegative, got {}", self.weight_decay));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if let Some(r) = self.small_loss_ratio {
            if !(r > 0.0 && r <= 1.0) {
                return bad(format!("small_loss_ratio must be in (0, 1], got {r}"));
            }
        }
        if !(self.confusion_smoothing >= 0.0) {
            return bad("confusion_smoothing must be nonnegative".into());
        }
        if !(0.0..0.5).contains(&self.validation_fraction) {
            return bad(format!(
                "validation_fraction must be in [0, 0.5), got {}",
                self.validation_fraction
            ));
        }
        Ok(())
    }

    pub fn resolved_model_seeds(&self) -> [u64; 2] {
        self.model_seeds
            .unwrap_or_else(|| [mix(self.seed, 1), mix(self.seed, 2)])
    }
}

pub(crate) fn mix(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// One classifier with its optimizer and minibatch generator.
#[derive(Debug, Clone)]
pub struct Learner {
    pub model: SoftmaxModel,
    /// `None` until the first multiplier update; the first robust epoch
    /// then trains the nominal loss, the `gamma -> inf` limit.
    pub gamma: Option<f64>,
    optimizer: Optimizer,
    rng: ChaCha8Rng,
}

impl Learner {
    pub fn new(config: &TrainConfig, d: usize, k: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = SoftmaxModel::init(config.architecture, d, k, &mut rng);
        Ok(Self {
            model,
            gamma: None,
            optimizer: Optimizer::new(config.optimizer, config.learning_rate, config.weight_decay)?,
            rng,
        })
    }

    /// One pass over `(row, reference)` pairs in shuffled minibatches.
    /// `gamma = None` trains the nominal loss. Returns the mean batch loss.
    fn run_epoch(
        &mut self,
        data: &AnnotationDataset,
        items: &[(usize, CategoricalDist)],
        config: &TrainConfig,
        gamma: Option<f64>,
    ) -> Result<f64> {
        let mut order: Vec<usize> = (0..items.len()).collect();
        order.shuffle(&mut self.rng);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(config.batch_size) {
            let rows: Vec<&[f64]> = chunk.iter().map(|&t| data.row(items[t].0)).collect();
            let refs: Vec<CategoricalDist> = chunk.iter().map(|&t| items[t].1.clone()).collect();
            let (loss, grad) = match gamma {
                Some(g) => robust_batch_gradient(&self.model, &rows, &refs, &config.spec, g)?,
                None => nominal_batch_gradient(&self.model, &rows, &refs, config.spec.transform)?,
            };
            self.optimizer.step(&mut self.model, &grad);
            total += loss;
            batches += 1;
        }
        Ok(if batches == 0 { 0.0 } else { total / batches as f64 })
    }
}

/// Per-epoch metrics record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: String,
    pub train_loss: f64,
    pub gamma_a: Option<f64>,
    pub gamma_b: Option<f64>,
    pub pseudo_coverage: Option<f64>,
    pub pseudo_precision: Option<f64>,
    pub fallback_a: bool,
    pub fallback_b: bool,
    pub mismatch_a: Option<f64>,
    pub mismatch_b: Option<f64>,
    pub acc_a: Option<f64>,
    pub acc_b: Option<f64>,
    pub val_acc: Option<f64>,
    pub test_acc: Option<f64>,
}

/// Both learners plus the training history.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub a: Learner,
    pub b: Learner,
    pub epoch: usize,
    pub history: Vec<EpochRecord>,
}

impl TrainState {
    pub fn new(config: &TrainConfig, d: usize, k: usize) -> Result<Self> {
        let [sa, sb] = config.resolved_model_seeds();
        Ok(Self {
            a: Learner::new(config, d, k, sa)?,
            b: Learner::new(config, d, k, sb)?,
            epoch: 0,
            history: Vec::new(),
        })
    }
}

/// Average of the two classifiers' probabilities.
pub fn ensemble_probs(a: &SoftmaxModel, b: &SoftmaxModel, x: &[f64]) -> Result<Vec<f64>> {
    let pa = a.probs(x)?;
    let pb = b.probs(x)?;
    Ok(pa.iter().zip(&pb).map(|(u, v)| 0.5 * (u + v)).collect())
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

/// Accuracy of the ensemble on the given rows.
pub fn ensemble_accuracy<'a>(
    a: &SoftmaxModel,
    b: &SoftmaxModel,
    rows: impl Iterator<Item = &'a [f64]>,
    labels: &[usize],
) -> Result<f64> {
    let mut hits = 0usize;
    let mut n = 0usize;
    for (x, y) in rows.zip(labels) {
        if argmax(&ensemble_probs(a, b, x)?) == *y {
            hits += 1;
        }
        n += 1;
    }
    if n == 0 {
        return Err(Error::EmptyInput("accuracy of an empty set"));
    }
    Ok(hits as f64 / n as f64)
}

/// Accuracy of one model on the given rows.
pub fn model_accuracy<'a>(
    model: &SoftmaxModel,
    rows: impl Iterator<Item = &'a [f64]>,
    labels: &[usize],
) -> Result<f64> {
    let mut hits = 0usize;
    let mut n = 0usize;
    for (x, y) in rows.zip(labels) {
        if model.predict_class(x)? == *y {
            hits += 1;
        }
        n += 1;
    }
    if n == 0 {
        return Err(Error::EmptyInput("accuracy of an empty set"));
    }
    Ok(hits as f64 / n as f64)
}

fn point_mass_items(labels: &[usize], k: usize) -> Vec<(usize, CategoricalDist)> {
    labels
        .iter()
        .enumerate()
        .map(|(i, &y)| (i, CategoricalDist::point_mass(k, y)))
        .collect()
}

/// Trains both classifiers for `config.warmup_epochs` epochs of clipped
/// cross-entropy on majority-vote labels.
pub fn warmup(
    state: &mut TrainState,
    data: &AnnotationDataset,
    mv: &[usize],
    config: &TrainConfig,
) -> Result<()> {
    let items = point_mass_items(mv, data.k());
    for _ in 0..config.warmup_epochs {
        let (la, lb) = rayon::join(
            || state.a.run_epoch(data, &items, config, None),
            || state.b.run_epoch(data, &items, config, None),
        );
        let (la, lb) = (la?, lb?);
        state.epoch += 1;
        state.history.push(EpochRecord {
            epoch: state.epoch,
            phase: "warmup".into(),
            train_loss: 0.5 * (la + lb),
            gamma_a: state.a.gamma,
            gamma_b: state.b.gamma,
            pseudo_coverage: None,
            pseudo_precision: None,
            fallback_a: false,
            fallback_b: false,
            mismatch_a: None,
            mismatch_b: None,
            acc_a: None,
            acc_b: None,
            val_acc: None,
            test_acc: None,
        });
    }
    Ok(())
}

/// `1 -` the fraction of instances where the ensemble's prediction
/// disagrees with the majority vote, floored at `1 / n`.
pub fn estimate_small_loss_ratio(state: &TrainState, data: &AnnotationDataset, mv: &[usize]) -> Result<f64> {
    let mut disagree = 0usize;
    for (i, &y) in mv.iter().enumerate() {
        if argmax(&ensemble_probs(&state.a.model, &state.b.model, data.row(i))?) != y {
            disagree += 1;
        }
    }
    let n = mv.len() as f64;
    Ok((1.0 - disagree as f64 / n).max(1.0 / n))
}

/// The `ceil(ratio * n)` instances with the smallest clipped cross-entropy
/// against their majority-vote label, averaged over both classifiers, as
/// `(instance, label)` pairs. Ties go to the smaller index.
pub fn select_small_loss(
    state: &TrainState,
    data: &AnnotationDataset,
    mv: &[usize],
    ratio: f64,
) -> Result<Vec<(usize, usize)>> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::Config(format!("small-loss ratio must be in (0, 1], got {ratio}")));
    }
    let ce = Transform::ClippedNegLog;
    let mut losses = Vec::with_capacity(mv.len());
    for (i, &y) in mv.iter().enumerate() {
        let x = data.row(i);
        use crate::types::LossTransform;
        let la = ce.value(state.a.model.probs(x)?[y]);
        let lb = ce.value(state.b.model.probs(x)?[y]);
        losses.push((0.5 * (la + lb), i));
    }
    losses.sort_by(|p, q| p.0.total_cmp(&q.0).then(p.1.cmp(&q.1)));
    let m = ((ratio * mv.len() as f64).ceil() as usize).clamp(1, mv.len());
    let mut anchors: Vec<(usize, usize)> = losses[..m].iter().map(|&(_, i)| (i, mv[i])).collect();
    anchors.sort_unstable();
    Ok(anchors)
}

/// Pseudo-labelled reference items built from one classifier's posteriors.
struct Reference {
    items: Vec<(usize, CategoricalDist)>,
    coverage: f64,
    precision: Option<f64>,
    fallback: bool,
}

fn build_reference(
    model: &SoftmaxModel,
    data: &AnnotationDataset,
    confusions: &ConfusionModel,
    mv: &[usize],
    config: &TrainConfig,
) -> Result<Reference> {
    let posteriors: Vec<CategoricalDist> = (0..data.n())
        .map(|i| {
            let prior = CategoricalDist::from_weights(&model.probs(data.row(i))?)?;
            bayes_posterior(&prior, confusions, data.annotations_of(i))
        })
        .collect::<Result<_>>()?;
    let set = build_pseudo_empirical(data, &posteriors, config.lrt_threshold)?;
    let precision = data.true_labels().and_then(|t| set.precision(t));
    if set.is_empty() {
        return Ok(Reference {
            items: point_mass_items(mv, data.k()),
            coverage: 0.0,
            precision,
            fallback: true,
        });
    }
    let items = set
        .entries
        .iter()
        .map(|e| {
            let r = if config.soft_reference {
                posteriors[e.instance].clone()
            } else {
                CategoricalDist::point_mass(data.k(), e.label)
            };
            (e.instance, r)
        })
        .collect();
    Ok(Reference {
        items,
        coverage: set.coverage,
        precision,
        fallback: false,
    })
}

/// Trains `learner` on `reference` at its current multiplier, then takes
/// one multiplier step. Returns `(loss, mismatch rate)`.
fn robust_phase(
    learner: &mut Learner,
    data: &AnnotationDataset,
    reference: &Reference,
    config: &TrainConfig,
) -> Result<(f64, f64)> {
    let gamma = learner.gamma;
    let loss = learner.run_epoch(data, &reference.items, config, gamma)?;
    let penalty = gamma.map_or(f64::INFINITY, |g| g * config.spec.kappa_p());

    let spec = &config.spec;
    let mut preds = Vec::with_capacity(reference.items.len());
    let mut mismatch = 0.0;
    for (i, r) in &reference.items {
        let pred = CategoricalDist::from_weights(&learner.model.probs(data.row(*i))?)?;
        let losses = spec.loss_vector(&pred);
        for (j, pj) in r.probs().iter().enumerate() {
            if *pj > 0.0 && inner_sup_from_losses(&losses, j, penalty).1 != j {
                mismatch += pj;
            }
        }
        preds.push(pred);
    }
    mismatch /= reference.items.len() as f64;
    let refs: Vec<CategoricalDist> = reference.items.iter().map(|(_, r)| r.clone()).collect();
    let gamma0 = closed_form_empirical_risk(spec, &preds, &refs)?.gamma_star;
    learner.gamma = Some(gamma_one_step(
        gamma0,
        spec.epsilon,
        spec.p,
        spec.kappa,
        mismatch,
        config.lambda,
    )?);
    Ok((loss, mismatch))
}

/// Held-out rows with labels used for scoring.
pub struct EvalSplit<'a> {
    pub data: &'a AnnotationDataset,
    pub labels: Vec<usize>,
}

/// One robust epoch for both classifiers. Each classifier is trained on
/// the pseudo-labels derived from its peer's posteriors.
pub fn train_epoch(
    state: &mut TrainState,
    data: &AnnotationDataset,
    confusions: &ConfusionModel,
    mv: &[usize],
    config: &TrainConfig,
) -> Result<EpochRecord> {
    let (ref_a, ref_b) = rayon::join(
        || build_reference(&state.a.model, data, confusions, mv, config),
        || build_reference(&state.b.model, data, confusions, mv, config),
    );
    let (ref_a, ref_b) = (ref_a?, ref_b?);
    let (ra, rb) = rayon::join(
        || robust_phase(&mut state.a, data, &ref_b, config),
        || robust_phase(&mut state.b, data, &ref_a, config),
    );
    let ((la, ma), (lb, mb)) = (ra?, rb?);
    state.epoch += 1;
    let precision = match (ref_a.precision, ref_b.precision) {
        (Some(x), Some(y)) => Some(0.5 * (x + y)),
        _ => None,
    };
    let record = EpochRecord {
        epoch: state.epoch,
        phase: "robust".into(),
        train_loss: 0.5 * (la + lb),
        gamma_a: state.a.gamma,
        gamma_b: state.b.gamma,
        pseudo_coverage: Some(0.5 * (ref_a.coverage + ref_b.coverage)),
        pseudo_precision: precision,
        fallback_a: ref_b.fallback,
        fallback_b: ref_a.fallback,
        mismatch_a: Some(ma),
        mismatch_b: Some(mb),
        acc_a: None,
        acc_b: None,
        val_acc: None,
        test_acc: None,
    };
    state.history.push(record.clone());
    Ok(record)
}

/// Result of a full training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Classifiers at the selected epoch.
    pub model_a: SoftmaxModel,
    pub model_b: SoftmaxModel,
    pub selected_epoch: usize,
    pub history: Vec<EpochRecord>,
    pub small_loss_ratio: f64,
    pub anchors: usize,
    pub confusions: ConfusionModel,
    pub final_gammas: [Option<f64>; 2],
}

/// Deterministic train/validation split of `0..n`.
pub fn split_indices(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(seed, 3)));
    let n_val = ((fraction * n as f64).round() as usize).min(n.saturating_sub(1));
    let mut val = idx[..n_val].to_vec();
    let mut train = idx[n_val..].to_vec();
    val.sort_unstable();
    train.sort_unstable();
    (train, val)
}

fn score(
    a: &SoftmaxModel,
    b: &SoftmaxModel,
    val: Option<&EvalSplit>,
    test: Option<&CleanDataset>,
) -> Result<(Option<f64>, Option<f64>)> {
    let val_acc = match val {
        Some(v) => Some(ensemble_accuracy(a, b, (0..v.data.n()).map(|i| v.data.row(i)), &v.labels)?),
        None => None,
    };
    let test_acc = match test {
        Some(t) => Some(ensemble_accuracy(a, b, (0..t.n()).map(|i| t.row(i)), t.labels())?),
        None => None,
    };
    Ok((val_acc, test_acc))
}

/// Full robust training run.
///
/// `data` is split into training and validation parts; the selected
/// classifiers are those with the best validation accuracy against
/// majority votes (the last epoch when there is no validation split).
/// `observer` sees every finished epoch record.
pub fn fit(
    data: &AnnotationDataset,
    test: Option<&CleanDataset>,
    config: &TrainConfig,
    mut observer: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    config.validate(data.k())?;
    if let Some(t) = test {
        if t.d() != data.d() || t.k() != data.k() {
            return Err(Error::DimensionMismatch { expected: data.d(), actual: t.d() });
        }
    }
    let (train_idx, val_idx) = split_indices(data.n(), config.validation_fraction, config.seed);
    let train = data.subset(&train_idx)?;
    let val_data = if val_idx.is_empty() { None } else { Some(data.subset(&val_idx)?) };
    let mv = majority_vote(&train, mix(config.seed, 4));
    let val = val_data.as_ref().map(|v| EvalSplit {
        data: v,
        labels: majority_vote(v, mix(config.seed, 5)),
    });

    let mut state = TrainState::new(config, data.d(), data.k())?;
    warmup(&mut state, &train, &mv, config)?;
    for rec in &mut state.history {
        observer(rec);
    }

    let ratio = match config.small_loss_ratio {
        Some(r) => r,
        None => estimate_small_loss_ratio(&state, &train, &mv)?,
    };
    let anchors = select_small_loss(&state, &train, &mv, ratio)?;
    let confusions = estimate_confusions(&train, &anchors, config.confusion_smoothing)?;

    let (mut best_val, _) = score(&state.a.model, &state.b.model, val.as_ref(), None)?;
    let mut best = (state.a.model.clone(), state.b.model.clone(), state.epoch);
    while state.epoch < config.epochs {
        let mut rec = train_epoch(&mut state, &train, &confusions, &mv, config)?;
        let (val_acc, test_acc) = score(&state.a.model, &state.b.model, val.as_ref(), test)?;
        if let Some(t) = test {
            let rows = || (0..t.n()).map(|i| t.row(i));
            rec.acc_a = Some(model_accuracy(&state.a.model, rows(), t.labels())?);
            rec.acc_b = Some(model_accuracy(&state.b.model, rows(), t.labels())?);
        }
        rec.val_acc = val_acc;
        rec.test_acc = test_acc;
        *state.history.last_mut().expect("record pushed") = rec.clone();
        observer(&rec);
        let improved = match (val_acc, best_val) {
            (Some(v), Some(b)) => v > b,
            _ => true,
        };
        if improved {
            best_val = val_acc;
            best = (state.a.model.clone(), state.b.model.clone(), state.epoch);
        }
    }

    Ok(TrainOutcome {
        model_a: best.0,
        model_b: best.1,
        selected_epoch: best.2,
        history: state.history,
        small_loss_ratio: ratio,
        anchors: anchors.len(),
        confusions,
        final_gammas: [state.a.gamma, state.b.gamma],
    })
}

/// Result of a single-classifier baseline.
#[derive(Debug, Clone)]
pub struct BaselineOutcome {
    pub model: SoftmaxModel,
    pub selected_epoch: usize,
    pub val_acc: Option<f64>,
}

/// Clipped cross-entropy on fixed per-instance labels for `config.epochs`
/// epochs, with the same split and model selection as [`fit`].
/// `label_fn` maps the training part of the split to labels.
pub fn fit_baseline(
    data: &AnnotationDataset,
    config: &TrainConfig,
    label_fn: impl Fn(&AnnotationDataset) -> Result<Vec<usize>>,
) -> Result<BaselineOutcome> {
    config.validate(data.k())?;
    let (train_idx, val_idx) = split_indices(data.n(), config.validation_fraction, config.seed);
    let train = data.subset(&train_idx)?;
    let labels = label_fn(&train)?;
    if labels.len() != train.n() {
        return Err(Error::LengthMismatch { left: labels.len(), right: train.n() });
    }
    let val_data = if val_idx.is_empty() { None } else { Some(data.subset(&val_idx)?) };
    let val_labels = val_data.as_ref().map(|v| majority_vote(v, mix(config.seed, 5)));

    let mut learner = Learner::new(config, data.d(), data.k(), config.resolved_model_seeds()[0])?;
    let items = point_mass_items(&labels, data.k());
    let mut best: Option<(f64, SoftmaxModel, usize)> = None;
    for epoch in 1..=config.epochs {
        learner.run_epoch(&train, &items, config, None)?;
        let acc = match (&val_data, &val_labels) {
            (Some(v), Some(l)) => Some(model_accuracy(&learner.model, (0..v.n()).map(|i| v.row(i)), l)?),
            _ => None,
        };
        let better = match (&best, acc) {
            (Some((b, _, _)), Some(a)) => a > *b,
            _ => true,
        };
        if better {
            best = Some((acc.unwrap_or(f64::NAN), learner.model.clone(), epoch));
        }
    }
    let (val_acc, model, selected_epoch) = best.expect("at least one epoch");
    Ok(BaselineOutcome {
        model,
        selected_epoch,
        val_acc: (!val_acc.is_nan()).then_some(val_acc),
    })
}
