//! Flat key-value experiment configuration. Every key is optional; values
//! from the file are applied over the built-in defaults and command-line
//! flags are applied last.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use cdro_core::classifier::{Architecture, OptimizerKind};
use cdro_core::experiment::BenchmarkConfig;
use cdro_core::Transform;
use serde::Deserialize;

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data_dir: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
    pub seed: Option<u64>,

    pub preset: Option<String>,
    pub n: Option<usize>,
    pub n_test: Option<usize>,
    pub d: Option<usize>,
    pub k: Option<usize>,
    pub separation: Option<f64>,
    pub labels_per_instance: Option<usize>,

    pub transform: Option<String>,
    pub epsilon: Option<f64>,
    pub kappa: Option<f64>,
    pub p: Option<f64>,
    pub lrt_threshold: Option<f64>,
    pub lambda: Option<f64>,
    pub epochs: Option<usize>,
    pub warmup_epochs: Option<usize>,
    pub allow_zero_warmup: Option<bool>,
    pub learning_rate: Option<f64>,
    pub weight_decay: Option<f64>,
    pub batch_size: Option<usize>,
    pub architecture: Option<String>,
    /// `adam` or `sgd`.
    pub optimizer: Option<String>,
    pub momentum: Option<f64>,
    pub small_loss_ratio: Option<f64>,
    pub confusion_smoothing: Option<f64>,
    pub validation_fraction: Option<f64>,
    pub soft_reference: Option<bool>,

    pub baseline_mv: Option<bool>,
    pub baseline_em: Option<bool>,
    pub em_max_iters: Option<usize>,
    pub em_tol: Option<f64>,
    pub em_smoothing: Option<f64>,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn load_opt(path: Option<&Path>) -> Result<Self> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }

    /// Applies every set key to `base`. Baselines are off unless enabled.
    pub fn apply(&self, mut base: BenchmarkConfig) -> Result<BenchmarkConfig> {
        macro_rules! set {
            ($field:ident => $target:expr) => {
                if let Some(v) = self.$field.clone() {
                    $target = v;
                }
            };
        }
        base.baseline_mv = false;
        base.baseline_em = false;
        set!(preset => base.preset);
        set!(n => base.n);
        set!(n_test => base.n_test);
        set!(d => base.d);
        set!(k => base.k);
        set!(separation => base.separation);
        set!(labels_per_instance => base.labels_per_instance);
        set!(baseline_mv => base.baseline_mv);
        set!(baseline_em => base.baseline_em);
        set!(em_max_iters => base.em_max_iters);
        set!(em_tol => base.em_tol);
        set!(em_smoothing => base.em_smoothing);

        let t = &mut base.train;
        set!(seed => t.seed);
        set!(epsilon => t.spec.epsilon);
        set!(kappa => t.spec.kappa);
        set!(p => t.spec.p);
        set!(lrt_threshold => t.lrt_threshold);
        set!(lambda => t.lambda);
        set!(epochs => t.epochs);
        set!(warmup_epochs => t.warmup_epochs);
        set!(allow_zero_warmup => t.allow_zero_warmup);
        set!(learning_rate => t.learning_rate);
        set!(weight_decay => t.weight_decay);
        set!(batch_size => t.batch_size);
        set!(confusion_smoothing => t.confusion_smoothing);
        set!(validation_fraction => t.validation_fraction);
        set!(soft_reference => t.soft_reference);
        if let Some(r) = self.small_loss_ratio {
            t.small_loss_ratio = Some(r);
        }
        if let Some(s) = &self.transform {
            t.spec.transform = s.parse::<Transform>()?;
        }
        if let Some(s) = &self.architecture {
            t.architecture = s.parse::<Architecture>()?;
        }
        match (self.optimizer.as_deref(), self.momentum) {
            (None, None) => {}
            (Some("adam"), None) => t.optimizer = OptimizerKind::adam(),
            (Some("sgd"), m) => t.optimizer = OptimizerKind::Sgd { momentum: m.unwrap_or(0.9) },
            (None | Some("adam"), Some(_)) => bail!("momentum applies only to optimizer = \"sgd\""),
            (Some(other), _) => bail!("unknown optimizer `{other}` (expected adam or sgd)"),
        }
        Ok(base)
    }
}
