//! Synthetic benchmark: robust training against cross-entropy on majority
//! votes and on Dawid-Skene labels, over several seeds.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::noise_sim::{annotate, make_gaussian_dataset, preset, realized_noise_rate, CleanDataset};
use crate::posterior::{dawid_skene_em, majority_vote};
use crate::trainer::{
    ensemble_accuracy, fit, fit_baseline, mix, model_accuracy, EpochRecord, TrainConfig, TrainOutcome,
};
use crate::types::AnnotationDataset;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkConfig {
    pub n: usize,
    pub n_test: usize,
    pub d: usize,
    pub k: usize,
    pub separation: f64,
    pub preset: String,
    pub labels_per_instance: usize,
    pub seeds: Vec<u64>,
    pub baseline_mv: bool,
    pub baseline_em: bool,
    pub em_max_iters: usize,
    pub em_tol: f64,
    pub em_smoothing: f64,
    pub train: TrainConfig,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            n: 5000,
            n_test: 2000,
            d: 10,
            k: 4,
            separation: 3.5,
            preset: "idn-mid-r5".into(),
            labels_per_instance: 1,
            seeds: (0..5).collect(),
            baseline_mv: true,
            baseline_em: true,
            em_max_iters: 100,
            em_tol: 1e-6,
            em_smoothing: 0.01,
            // With one label per instance the anchor counts are nearly
            // diagonal; a heavier prior lets the classifier outvote them.
            train: TrainConfig {
                confusion_smoothing: 100.0,
                ..TrainConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodResult {
    pub test_acc: Option<f64>,
    pub val_acc: Option<f64>,
    pub selected_epoch: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub noise_rate: Option<f64>,
    pub adaptcdrp: MethodResult,
    pub ce_mv: Option<MethodResult>,
    pub ce_em: Option<MethodResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanAccuracy {
    pub test_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkSummary {
    pub adaptcdrp: Option<MeanAccuracy>,
    pub ce_mv: Option<MeanAccuracy>,
    pub ce_em: Option<MeanAccuracy>,
    pub seeds: Vec<SeedResult>,
}

/// Noisy training data and a clean test set for one seed.
pub fn benchmark_data(config: &BenchmarkConfig, seed: u64) -> Result<(AnnotationDataset, CleanDataset)> {
    let clean = make_gaussian_dataset(config.n, config.d, config.k, config.separation, seed)?;
    let annotators = preset(&config.preset)?;
    let data = annotate(&clean, &annotators, config.labels_per_instance, seed)?;
    let test = make_gaussian_dataset(config.n_test, config.d, config.k, config.separation, mix(seed, 77))?;
    Ok((data, test))
}

fn rows(set: &CleanDataset) -> impl Iterator<Item = &[f64]> {
    (0..set.n()).map(|i| set.row(i))
}

/// Per-method results plus the selected robust classifiers.
#[derive(Debug, Clone)]
pub struct MethodsOutcome {
    pub result: SeedResult,
    pub train: TrainOutcome,
}

/// Runs every enabled method on already generated data. Accuracies are
/// measured on `eval` when given; `observer` sees each robust-training
/// epoch record.
pub fn run_methods_observed(
    data: &AnnotationDataset,
    eval: Option<&CleanDataset>,
    config: &BenchmarkConfig,
    seed: u64,
    observer: impl FnMut(&EpochRecord),
) -> Result<MethodsOutcome> {
    let train = TrainConfig { seed, ..config.train.clone() };
    let out = fit(data, eval, &train, observer)?;
    let val_acc = out
        .history
        .iter()
        .find(|r| r.epoch == out.selected_epoch)
        .and_then(|r| r.val_acc);
    let adaptcdrp = MethodResult {
        test_acc: eval
            .map(|t| ensemble_accuracy(&out.model_a, &out.model_b, rows(t), t.labels()))
            .transpose()?,
        val_acc,
        selected_epoch: out.selected_epoch,
    };
    let baseline = |labels: &dyn Fn(&AnnotationDataset) -> Result<Vec<usize>>| -> Result<MethodResult> {
        let b = fit_baseline(data, &train, labels)?;
        Ok(MethodResult {
            test_acc: eval
                .map(|t| model_accuracy(&b.model, rows(t), t.labels()))
                .transpose()?,
            val_acc: b.val_acc,
            selected_epoch: b.selected_epoch,
        })
    };
    let ce_mv = if config.baseline_mv {
        Some(baseline(&|t| Ok(majority_vote(t, mix(seed, 4))))?)
    } else {
        None
    };
    let ce_em = if config.baseline_em {
        Some(baseline(&|t| {
            let em = dawid_skene_em(t, config.em_max_iters, config.em_tol, config.em_smoothing)?;
            Ok(em.posteriors.iter().map(|p| p.argmax()).collect())
        })?)
    } else {
        None
    };
    Ok(MethodsOutcome {
        result: SeedResult {
            seed,
            noise_rate: realized_noise_rate(data),
            adaptcdrp,
            ce_mv,
            ce_em,
        },
        train: out,
    })
}

pub fn run_methods(
    data: &AnnotationDataset,
    test: &CleanDataset,
    config: &BenchmarkConfig,
    seed: u64,
) -> Result<SeedResult> {
    Ok(run_methods_observed(data, Some(test), config, seed, |_| {})?.result)
}

pub fn run_seed(config: &BenchmarkConfig, seed: u64) -> Result<SeedResult> {
    let (data, test) = benchmark_data(config, seed)?;
    run_methods(&data, &test, config, seed)
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

/// Runs all seeds in parallel; results are ordered by seed position and do
/// not depend on scheduling.
pub fn run_benchmark(config: &BenchmarkConfig) -> Result<BenchmarkSummary> {
    config.train.validate(config.k)?;
    let seeds: Vec<SeedResult> = config
        .seeds
        .par_iter()
        .map(|&s| run_seed(config, s))
        .collect::<Result<_>>()?;
    Ok(summarize(seeds))
}

pub fn summarize(seeds: Vec<SeedResult>) -> BenchmarkSummary {
    let avg = |f: &dyn Fn(&SeedResult) -> Option<f64>| -> Option<MeanAccuracy> {
        let vals: Vec<f64> = seeds.iter().filter_map(f).collect();
        (!vals.is_empty() && vals.len() == seeds.len()).then(|| MeanAccuracy {
            test_acc: mean(vals.into_iter()),
        })
    };
    BenchmarkSummary {
        adaptcdrp: avg(&|s| s.adaptcdrp.test_acc),
        ce_mv: avg(&|s| s.ce_mv.as_ref().and_then(|m| m.test_acc)),
        ce_em: avg(&|s| s.ce_em.as_ref().and_then(|m| m.test_acc)),
        seeds,
    }
}
