//! `cdro`: generate noisy crowdsourced datasets, train robust classifiers
//! and baselines, evaluate checkpoints and run the oracle suites.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use cdro_core::classifier::SoftmaxModel;
use cdro_core::experiment::{benchmark_data, run_methods_observed, BenchmarkConfig, MethodResult};
use cdro_core::io::{self, DatasetManifest, JsonlWriter};
use cdro_core::noise_sim::{preset_names, CleanDataset};
use cdro_core::oracles;
use cdro_core::trainer::{ensemble_accuracy, model_accuracy};
use cdro_core::AnnotationDataset;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::config::ExperimentConfig;

/// Relative output paths are resolved against this directory.
const OUTPUT_ROOT_ENV: &str = "CDRO_OUTPUT_ROOT";

#[derive(Parser)]
#[command(name = "cdro", version, about = "Conditional distributionally robust learning from noisy crowd labels")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a Gaussian dataset with instance-dependent annotator noise.
    Generate(GenerateArgs),
    /// Train the robust classifier pair (and optional baselines) on a dataset.
    Train(TrainArgs),
    /// Score saved checkpoints on a dataset's clean labels.
    Eval(EvalArgs),
    /// Run the randomized oracle suites and report pass/fail.
    OracleCheck(OracleArgs),
}

#[derive(Args)]
struct Common {
    /// Flat TOML file with experiment keys; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; relative paths go under $CDRO_OUTPUT_ROOT.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GenerateArgs {
    #[command(flatten)]
    common: Common,
    /// Annotator group, e.g. idn-mid-r5.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    n_test: Option<usize>,
    #[arg(long)]
    labels_per_instance: Option<usize>,
    /// List the available presets and exit.
    #[arg(long)]
    list_presets: bool,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Baseline {
    Mv,
    Em,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Dataset directory written by `generate` or in the same CSV layout.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    lrt_threshold: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    warmup_epochs: Option<usize>,
    /// Also train a cross-entropy baseline; repeatable.
    #[arg(long, value_enum)]
    baseline: Vec<Baseline>,
}

#[derive(Args)]
struct EvalArgs {
    /// Run directory holding model_a.ckpt and model_b.ckpt.
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    data: PathBuf,
}

#[derive(Args)]
struct OracleArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Fewer cases per suite.
    #[arg(long)]
    quick: bool,
}

fn output_dir(flag: Option<&Path>, file: Option<&Path>, fallback: &str) -> PathBuf {
    let path = flag.or(file).map_or_else(|| PathBuf::from(fallback), Path::to_path_buf);
    if path.is_absolute() {
        return path;
    }
    match std::env::var_os(OUTPUT_ROOT_ENV) {
        Some(root) => PathBuf::from(root).join(path),
        None => path,
    }
}

fn resolve(common: &Common) -> Result<(ExperimentConfig, BenchmarkConfig)> {
    let file = ExperimentConfig::load_opt(common.config.as_deref())?;
    let mut config = file.apply(BenchmarkConfig::default())?;
    if let Some(s) = common.seed {
        config.train.seed = s;
    }
    Ok((file, config))
}

fn generate(args: GenerateArgs) -> Result<()> {
    if args.list_presets {
        for name in preset_names() {
            println!("{name}");
        }
        return Ok(());
    }
    let (file, mut config) = resolve(&args.common)?;
    if let Some(p) = args.preset {
        config.preset = p;
    }
    if let Some(n) = args.n {
        config.n = n;
    }
    if let Some(n) = args.n_test {
        config.n_test = n;
    }
    if let Some(l) = args.labels_per_instance {
        config.labels_per_instance = l;
    }
    let seed = config.train.seed;
    let out = output_dir(
        args.common.out.as_deref(),
        file.output_dir.as_deref(),
        &format!("data-{}-seed{seed}", config.preset),
    );
    let (data, test) = benchmark_data(&config, seed)?;
    let manifest = DatasetManifest {
        n: data.n(),
        d: data.d(),
        k: data.k(),
        r: data.r(),
        seed: Some(seed),
        preset: Some(config.preset.clone()),
        separation: Some(config.separation),
        labels_per_instance: Some(config.labels_per_instance),
        n_test: Some(test.n()),
    };
    io::write_dataset(&out, &data, Some(&test), &manifest)
        .with_context(|| format!("writing dataset to {}", out.display()))?;
    println!("{}", out.display());
    Ok(())
}

/// Clean labels to score against: the test split if present, otherwise the
/// training truth.
fn evaluation_set(dir: &Path, data: &AnnotationDataset) -> Result<Option<(&'static str, CleanDataset)>> {
    if let Some(test) = io::load_test_split(dir, data.k())? {
        return Ok(Some(("test", test)));
    }
    Ok(match data.true_labels() {
        Some(t) => Some(("train-truth", CleanDataset::new(data.features().to_vec(), data.d(), data.k(), t.to_vec())?)),
        None => None,
    })
}

fn check_dataset_files(dir: &Path) -> Result<()> {
    for f in [io::FEATURES_FILE, io::ANNOTATIONS_FILE] {
        let p = dir.join(f);
        if !p.is_file() {
            bail!("missing dataset file {}", p.display());
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct TrainSummary {
    seed: u64,
    eval_set: Option<&'static str>,
    noise_rate: Option<f64>,
    adaptcdrp: MethodResult,
    #[serde(skip_serializing_if = "Option::is_none")]
    ce_mv: Option<MethodResult>,
    #[serde(skip_serializing_if = "Option::is_none")]
    ce_em: Option<MethodResult>,
    small_loss_ratio: f64,
    anchors: usize,
    final_gamma_a: Option<f64>,
    final_gamma_b: Option<f64>,
    seconds: f64,
}

fn train(args: TrainArgs) -> Result<()> {
    let (file, mut config) = resolve(&args.common)?;
    let t = &mut config.train;
    if let Some(v) = args.epsilon {
        t.spec.epsilon = v;
    }
    if let Some(v) = args.lrt_threshold {
        t.lrt_threshold = v;
    }
    if let Some(v) = args.lambda {
        t.lambda = v;
    }
    if let Some(v) = args.epochs {
        t.epochs = v;
    }
    if let Some(v) = args.warmup_epochs {
        t.warmup_epochs = v;
    }
    config.baseline_mv |= args.baseline.contains(&Baseline::Mv);
    config.baseline_em |= args.baseline.contains(&Baseline::Em);

    let Some(data_dir) = args.data.or(file.data_dir) else {
        bail!("no dataset: pass --data or set data_dir in the config file");
    };
    check_dataset_files(&data_dir)?;
    let data = io::load_dataset(&data_dir)?;
    config.train.validate(data.k())?;
    let eval = evaluation_set(&data_dir, &data)?;

    let seed = config.train.seed;
    let out = output_dir(args.common.out.as_deref(), file.output_dir.as_deref(), &format!("train-seed{seed}"));
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    io::write_json(&out.join("config.json"), &config)?;

    let start = Instant::now();
    let mut metrics = JsonlWriter::create(&out.join(io::METRICS_FILE))?;
    let mut write_err = None;
    let outcome = run_methods_observed(&data, eval.as_ref().map(|e| &e.1), &config, seed, |rec| {
        if let Err(e) = metrics.write(rec) {
            write_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = write_err {
        return Err(e).context("writing metrics");
    }
    outcome.train.model_a.save(&out.join("model_a.ckpt"))?;
    outcome.train.model_b.save(&out.join("model_b.ckpt"))?;
    let r = outcome.result;
    let summary = TrainSummary {
        seed,
        eval_set: eval.as_ref().map(|e| e.0),
        noise_rate: r.noise_rate,
        adaptcdrp: r.adaptcdrp,
        ce_mv: r.ce_mv,
        ce_em: r.ce_em,
        small_loss_ratio: outcome.train.small_loss_ratio,
        anchors: outcome.train.anchors,
        final_gamma_a: outcome.train.final_gammas[0],
        final_gamma_b: outcome.train.final_gammas[1],
        seconds: start.elapsed().as_secs_f64(),
    };
    io::write_json(&out.join(io::SUMMARY_FILE), &summary)?;
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

#[derive(Serialize)]
struct EvalReport {
    eval_set: &'static str,
    n: usize,
    ensemble_acc: f64,
    model_a_acc: f64,
    model_b_acc: f64,
}

fn eval(args: EvalArgs) -> Result<()> {
    let a = SoftmaxModel::load(&args.run.join("model_a.ckpt")).context("loading model_a.ckpt")?;
    let b = SoftmaxModel::load(&args.run.join("model_b.ckpt")).context("loading model_b.ckpt")?;
    check_dataset_files(&args.data)?;
    let data = io::load_dataset(&args.data)?;
    let Some((name, set)) = evaluation_set(&args.data, &data)? else {
        bail!("{} has neither a test split nor truth.csv", args.data.display());
    };
    let rows = || (0..set.n()).map(|i| set.row(i));
    let report = EvalReport {
        eval_set: name,
        n: set.n(),
        ensemble_acc: ensemble_accuracy(&a, &b, rows(), set.labels())?,
        model_a_acc: model_accuracy(&a, rows(), set.labels())?,
        model_b_acc: model_accuracy(&b, rows(), set.labels())?,
    };
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn oracle_check(args: OracleArgs) -> Result<bool> {
    let scale = |full: usize| if args.quick { (full / 10).max(1) } else { full };
    let s = args.seed;
    let suites = [
        oracles::duality_suite(s, scale(1000))?,
        oracles::binary_action_suite(s, scale(500))?,
        oracles::multiclass_action_suite(s, scale(500))?,
        oracles::closed_form_suite(s, scale(200))?,
        oracles::gradient_suite(s, scale(50))?,
    ];
    let mut all = true;
    for r in &suites {
        all &= r.passed();
        println!(
            "{} {}: {} cases, {} failures, max error {:.3e} (tol {:.0e})",
            if r.passed() { "PASS" } else { "FAIL" },
            r.name,
            r.cases,
            r.failures,
            r.max_error,
            r.tolerance
        );
        if let Some(f) = &r.first_failure {
            println!("  first failure: {f}");
        }
    }
    Ok(all)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate(a) => generate(a).map(|_| true),
        Command::Train(a) => train(a).map(|_| true),
        Command::Eval(a) => eval(a).map(|_| true),
        Command::OracleCheck(a) => oracle_check(a),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
