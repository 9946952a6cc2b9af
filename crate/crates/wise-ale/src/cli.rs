//! The `wise-ale` command line: data generation, training, evaluation,
//! certification suites, figure generation, and the three-objective
//! comparison run.
//!
//! Training configuration can come from flags, from a flat `key=value`
//! config file (`--config`), or both; flags override file values and the
//! effective configuration is echoed into the output directory as
//! `config.resolved` so a run can be reproduced from its artifacts alone.

use crate::data;
use crate::error::{Error, Result};
use crate::gaussian::kl_certification;
use crate::model::{Architecture, ModelParams};
use crate::objective::{
    full_recon_oracle, simplified_recon_estimate, ObjectiveKind,
};
use crate::report;
use crate::trainer::{
    self, evaluate, grad_check_suite, materialize, DatasetKind, OptimizerKind, RunConfig,
};
use clap::{Args, Parser, Subcommand, ValueEnum};
use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(
    name = "wise-ale",
    version,
    about = "Auto-encoder training with an aggregate-posterior prior constraint, plus baselines and oracles"
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a dataset and cache it on disk.
    GenData(GenDataArgs),
    /// Train one model.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a held-out split.
    Eval(EvalArgs),
    /// Draw the 2-D posterior scatter for a checkpoint.
    Embed(EmbedArgs),
    /// Plot training curves from metrics files.
    Curves(CurvesArgs),
    /// Render input-vs-reconstruction strips.
    Recon(ReconArgs),
    /// Certify reverse-mode gradients against central differences.
    CheckGrad(CheckGradArgs),
    /// Certify the analytic KL upper bound against its Monte-Carlo oracle.
    CheckKl(CheckKlArgs),
    /// Train all three objectives on one dataset and emit a joint report.
    Compare(CompareArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum DatasetArg {
    Sine,
    Mnist,
    SyntheticDigits,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ObjectiveArg {
    WiseAle,
    Aevb,
    BetaVae,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum OptimizerArg {
    Adam,
    Sgd,
}

#[derive(Args, Clone)]
struct DataFlags {
    /// Dataset kind.
    #[arg(long, value_enum)]
    dataset: Option<DatasetArg>,
    /// Rows to generate (sine / synthetic-digits).
    #[arg(long)]
    count: Option<usize>,
    /// Directory holding the IDX files (mnist).
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Use only the first N images (mnist).
    #[arg(long)]
    limit: Option<usize>,
}

#[derive(Args)]
struct GenDataArgs {
    #[command(flatten)]
    data: DataFlags,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Cache file (sine) or directory (synthetic-digits).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Flat key=value config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    data: DataFlags,
    #[arg(long, value_enum)]
    objective: Option<ObjectiveArg>,
    /// Prior weight for beta-vae.
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    latent_dim: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long, value_enum)]
    optimizer: Option<OptimizerArg>,
    /// Reparameterized draws per sample.
    #[arg(long)]
    mc_samples: Option<usize>,
    /// Rows held out for evaluation.
    #[arg(long)]
    eval_count: Option<usize>,
    /// Include the -M log M constant in the reported objective.
    #[arg(long)]
    include_nlogn: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataFlags,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    eval_count: Option<usize>,
}

#[derive(Args)]
struct EmbedArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataFlags,
    #[arg(long, default_value_t = 64)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory for embed.svg and embed.csv.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CurvesArgs {
    /// Metrics CSV files, one polyline per file.
    #[arg(long, num_args = 1.., required = true)]
    metrics: Vec<PathBuf>,
    #[arg(long, default_value_t = 1)]
    stride: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReconArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataFlags,
    /// Comma-separated row indices.
    #[arg(long)]
    indices: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CheckGradArgs {
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
}

#[derive(Args)]
struct CheckKlArgs {
    #[arg(long, default_value_t = 100)]
    trials: usize,
    #[arg(long, default_value_t = 100_000)]
    samples: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

#[derive(Args)]
struct CompareArgs {
    #[command(flatten)]
    data: DataFlags,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    latent_dim: Option<usize>,
    #[arg(long)]
    eval_count: Option<usize>,
    #[arg(long, default_value_t = 4.0)]
    beta: f64,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

/// Parsed key=value config file.
struct FileConfig(HashMap<String, String>);

const KNOWN_KEYS: &[&str] = &[
    "dataset",
    "count",
    "data-dir",
    "limit",
    "objective",
    "beta",
    "latent-dim",
    "batch-size",
    "epochs",
    "seed",
    "lr",
    "optimizer",
    "mc-samples",
    "eval-count",
    "include-nlogn",
    "out",
];

impl FileConfig {
    fn load(path: Option<&Path>) -> Result<Self> {
        let mut map = HashMap::new();
        if let Some(path) = path {
            let p = path.display().to_string();
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(p.clone(), e))?;
            for (i, line) in text.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let (key, value) = line.split_once('=').ok_or_else(|| {
                    Error::format(&p, format!("line {}: expected key=value", i + 1))
                })?;
                let key = key.trim();
                if !KNOWN_KEYS.contains(&key) {
                    return Err(Error::format(&p, format!("line {}: unknown key {key:?}", i + 1)));
                }
                map.insert(key.to_string(), value.trim().to_string());
            }
        }
        Ok(FileConfig(map))
    }

    fn get<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.0.get(key) {
            None => Ok(None),
            Some(raw) => raw
                .parse()
                .map(Some)
                .map_err(|_| Error::usage(format!("config key {key}: bad value {raw:?}"))),
        }
    }
}

/// Effective training configuration plus everything needed to echo it.
struct ResolvedTrain {
    run: RunConfig,
    echo: Vec<(String, String)>,
}

fn dataset_arg_name(d: DatasetArg) -> &'static str {
    match d {
        DatasetArg::Sine => "sine",
        DatasetArg::Mnist => "mnist",
        DatasetArg::SyntheticDigits => "synthetic-digits",
    }
}

fn parse_dataset_arg(s: &str) -> Result<DatasetArg> {
    match s {
        "sine" => Ok(DatasetArg::Sine),
        "mnist" => Ok(DatasetArg::Mnist),
        "synthetic-digits" => Ok(DatasetArg::SyntheticDigits),
        other => Err(Error::usage(format!("unknown dataset {other:?}"))),
    }
}

fn default_arch(dataset: DatasetArg, latent_dim: Option<usize>) -> Result<Architecture> {
    let mut arch = match dataset {
        DatasetArg::Sine => Architecture::sine_default(),
        DatasetArg::Mnist | DatasetArg::SyntheticDigits => {
            Architecture::image_embedding_default()
        }
    };
    if let Some(d_z) = latent_dim {
        if d_z == 0 {
            return Err(Error::usage("latent-dim must be positive"));
        }
        arch.d_z = d_z;
    }
    Ok(arch)
}

fn resolve_train(args: &TrainArgs) -> Result<ResolvedTrain> {
    let file = FileConfig::load(args.config.as_deref())?;

    let dataset_arg = match (&args.data.dataset, file.0.get("dataset")) {
        (Some(d), _) => *d,
        (None, Some(raw)) => parse_dataset_arg(raw)?,
        (None, None) => DatasetArg::Sine,
    };
    let count = args
        .data
        .count
        .or(file.get("count")?)
        .unwrap_or(match dataset_arg {
            DatasetArg::Sine => 20_000,
            _ => 10_000,
        });
    let data_dir: Option<PathBuf> = args
        .data
        .data_dir
        .clone()
        .or(file.0.get("data-dir").map(PathBuf::from));
    let limit = args.data.limit.or(file.get("limit")?);

    let objective_arg = match (&args.objective, file.0.get("objective")) {
        (Some(o), _) => *o,
        (None, Some(raw)) => match raw.as_str() {
            "wise-ale" => ObjectiveArg::WiseAle,
            "aevb" => ObjectiveArg::Aevb,
            "beta-vae" => ObjectiveArg::BetaVae,
            other => return Err(Error::usage(format!("unknown objective {other:?}"))),
        },
        (None, None) => ObjectiveArg::WiseAle,
    };
    let beta = args.beta.or(file.get("beta")?);
    let mc_samples = args.mc_samples.or(file.get("mc-samples")?).unwrap_or(1);
    let include_nlogn = args.include_nlogn
        || file.get::<bool>("include-nlogn")?.unwrap_or(false);
    let objective = match objective_arg {
        ObjectiveArg::WiseAle => ObjectiveKind::new(
            crate::objective::ObjectiveVariant::WiseAle,
            mc_samples,
            include_nlogn,
        )?,
        ObjectiveArg::Aevb => ObjectiveKind::new(
            crate::objective::ObjectiveVariant::Aevb,
            mc_samples,
            false,
        )?,
        ObjectiveArg::BetaVae => {
            let beta = beta.ok_or_else(|| {
                Error::usage("--beta is required when --objective beta-vae")
            })?;
            ObjectiveKind::new(
                crate::objective::ObjectiveVariant::BetaVae { beta },
                mc_samples,
                false,
            )?
        }
    };

    let latent_dim = args.latent_dim.or(file.get("latent-dim")?);
    let arch = default_arch(dataset_arg, latent_dim)?;
    let batch_size = args.batch_size.or(file.get("batch-size")?).unwrap_or(64);
    let epochs = args.epochs.or(file.get("epochs")?).unwrap_or(20);
    let seed = args.seed.or(file.get("seed")?).unwrap_or(0);
    let lr = args.lr.or(file.get("lr")?).unwrap_or(1e-3);
    let optimizer_arg = match (&args.optimizer, file.0.get("optimizer")) {
        (Some(o), _) => *o,
        (None, Some(raw)) => match raw.as_str() {
            "adam" => OptimizerArg::Adam,
            "sgd" => OptimizerArg::Sgd,
            other => return Err(Error::usage(format!("unknown optimizer {other:?}"))),
        },
        (None, None) => OptimizerArg::Adam,
    };
    let optimizer = match optimizer_arg {
        OptimizerArg::Adam => OptimizerKind::adam(lr),
        OptimizerArg::Sgd => OptimizerKind::Sgd { lr },
    };
    let eval_count = args
        .eval_count
        .or(file.get("eval-count")?)
        .unwrap_or(count / 10);
    let out_dir = args
        .out
        .clone()
        .or(file.0.get("out").map(PathBuf::from))
        .ok_or_else(|| Error::usage("--out is required"))?;

    let dataset = build_dataset_kind(dataset_arg, count, data_dir.as_deref(), limit)?;

    let mut echo = vec![
        ("dataset".into(), dataset_arg_name(dataset_arg).to_string()),
        ("count".into(), count.to_string()),
        ("objective".into(), objective.name().to_string()),
        ("mc-samples".into(), mc_samples.to_string()),
        ("include-nlogn".into(), include_nlogn.to_string()),
        ("latent-dim".into(), arch.d_z.to_string()),
        ("batch-size".into(), batch_size.to_string()),
        ("epochs".into(), epochs.to_string()),
        ("seed".into(), seed.to_string()),
        ("lr".into(), lr.to_string()),
        (
            "optimizer".into(),
            match optimizer_arg {
                OptimizerArg::Adam => "adam".into(),
                OptimizerArg::Sgd => "sgd".to_string(),
            },
        ),
        ("eval-count".into(), eval_count.to_string()),
        ("out".into(), out_dir.display().to_string()),
    ];
    if let Some(b) = beta {
        echo.push(("beta".into(), b.to_string()));
    }
    if let Some(d) = &data_dir {
        echo.push(("data-dir".into(), d.display().to_string()));
    }
    if let Some(l) = limit {
        echo.push(("limit".into(), l.to_string()));
    }

    Ok(ResolvedTrain {
        run: RunConfig {
            dataset,
            objective,
            arch,
            optimizer,
            batch_size,
            epochs,
            seed,
            eval_count,
            out_dir,
        },
        echo,
    })
}

fn build_dataset_kind(
    arg: DatasetArg,
    count: usize,
    data_dir: Option<&Path>,
    limit: Option<usize>,
) -> Result<DatasetKind> {
    Ok(match arg {
        DatasetArg::Sine => DatasetKind::Sine { count },
        DatasetArg::SyntheticDigits => DatasetKind::SyntheticDigits { count },
        DatasetArg::Mnist => {
            let dir = data_dir
                .ok_or_else(|| Error::usage("--data-dir is required for --dataset mnist"))?;
            DatasetKind::Mnist {
                dir: dir.to_path_buf(),
                limit,
            }
        }
    })
}

fn write_resolved_config(out_dir: &Path, echo: &[(String, String)]) -> Result<()> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;
    let mut pairs = echo.to_vec();
    pairs.sort();
    let mut text = String::new();
    for (k, v) in pairs {
        let _ = writeln!(text, "{k}={v}");
    }
    let path = out_dir.join("config.resolved");
    std::fs::write(&path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

fn cmd_gen_data(args: &GenDataArgs) -> Result<()> {
    let kind = args.data.dataset.ok_or_else(|| Error::usage("--dataset is required"))?;
    match kind {
        DatasetArg::Sine => {
            let count = args.data.count.unwrap_or(20_000);
            let ds = data::generate_sine(count, args.seed)?;
            data::save_sine(&ds, &args.out)?;
            println!(
                "wrote {count} sine rows to {} (+ metadata sidecar)",
                args.out.display()
            );
        }
        DatasetArg::SyntheticDigits => {
            let count = args.data.count.unwrap_or(10_000);
            let ds = data::generate_synthetic_digits(count, args.seed)?;
            data::write_mnist_idx(&args.out, data::MnistSplit::Train, &ds)?;
            println!(
                "wrote {count} synthetic digit images in IDX format under {}",
                args.out.display()
            );
        }
        DatasetArg::Mnist => {
            return Err(Error::usage(
                "mnist is loaded from existing IDX files, not generated; use --dataset sine or synthetic-digits",
            ));
        }
    }
    Ok(())
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let resolved = resolve_train(args)?;
    write_resolved_config(&resolved.run.out_dir, &resolved.echo)?;
    let outcome = trainer::train(&resolved.run)?;
    let last = outcome.metrics.last().expect("at least one step");
    println!(
        "trained {} for {} steps: objective {:.4}, recon {:.4}, prior {:.4}",
        resolved.run.objective.name(),
        outcome.metrics.len(),
        last.objective,
        last.recon_term,
        last.prior_term
    );
    println!("metrics: {}", outcome.metrics_path.display());
    println!("checkpoint: {}", outcome.checkpoint_path.display());
    Ok(())
}

/// Re-derives the train/eval split of a run and returns the eval rows.
fn eval_rows(
    kind: &DatasetKind,
    seed: u64,
    eval_count: usize,
) -> Result<(crate::autodiff::DenseArray, Option<Vec<data::SineMeta>>)> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    let data = materialize(kind, seed)?;
    let n = data.x.shape()[0];
    if eval_count == 0 || eval_count >= n {
        return Err(Error::usage(format!(
            "eval-count {eval_count} must be in 1..{n}"
        )));
    }
    let mut all: Vec<usize> = (0..n).collect();
    let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(1); // the trainer's split stream
    all.shuffle(&mut rng);
    let eval_idx = &all[..eval_count];
    let d = data.x.shape()[1];
    let mut rows = Vec::with_capacity(eval_count * d);
    for &i in eval_idx {
        rows.extend_from_slice(&data.x.data()[i * d..(i + 1) * d]);
    }
    let x = crate::autodiff::DenseArray::from_vec(vec![eval_count, d], rows)?;
    let meta = data
        .sine_meta
        .map(|m| eval_idx.iter().map(|&i| m[i]).collect());
    Ok((x, meta))
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let params = ModelParams::load(&args.checkpoint)?;
    let kind = resolve_data_flags(&args.data)?;
    let count = dataset_count(&kind);
    let eval_count = args.eval_count.unwrap_or(count / 10);
    let (x, meta) = eval_rows(&kind, args.seed, eval_count)?;
    let rec = evaluate(&params, &x, meta.as_deref(), args.seed)?;
    println!(
        "n={} recon_error={:.6} aevb_kl={:.6} elbo_proxy={:.6}",
        rec.n, rec.recon_error, rec.aevb_kl, rec.elbo_proxy
    );
    Ok(())
}

fn resolve_data_flags(flags: &DataFlags) -> Result<DatasetKind> {
    let arg = flags.dataset.ok_or_else(|| Error::usage("--dataset is required"))?;
    let count = flags.count.unwrap_or(match arg {
        DatasetArg::Sine => 20_000,
        _ => 10_000,
    });
    build_dataset_kind(arg, count, flags.data_dir.as_deref(), flags.limit)
}

fn dataset_count(kind: &DatasetKind) -> usize {
    match kind {
        DatasetKind::Sine { count } | DatasetKind::SyntheticDigits { count } => *count,
        DatasetKind::Mnist { limit, .. } => limit.unwrap_or(60_000),
    }
}

fn cmd_embed(args: &EmbedArgs) -> Result<()> {
    let params = ModelParams::load(&args.checkpoint)?;
    let kind = resolve_data_flags(&args.data)?;
    let data = materialize(&kind, args.seed)?;
    std::fs::create_dir_all(&args.out)
        .map_err(|e| Error::io(args.out.display().to_string(), e))?;
    let svg = args.out.join("embed.svg");
    let csv = args.out.join("embed.csv");
    let summary = report::embed_scatter(
        &params,
        &data.x,
        data.labels.as_deref(),
        args.n,
        args.seed,
        &svg,
        &csv,
    )?;
    println!(
        "embedded {} points: mean posterior sigma {:.6} -> {}",
        summary.n_points,
        summary.mean_sigma,
        svg.display()
    );
    Ok(())
}

fn cmd_curves(args: &CurvesArgs) -> Result<()> {
    let mut runs = Vec::new();
    for path in &args.metrics {
        let records = report::read_metrics_csv(path)?;
        let name = path
            .parent()
            .and_then(|p| p.file_name())
            .or_else(|| path.file_stem())
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| path.display().to_string());
        runs.push((name, records));
    }
    report::training_curves(&runs, args.stride, &args.out)?;
    println!("wrote {}", args.out.display());
    Ok(())
}

fn cmd_recon(args: &ReconArgs) -> Result<()> {
    let params = ModelParams::load(&args.checkpoint)?;
    let kind = resolve_data_flags(&args.data)?;
    let data = materialize(&kind, args.seed)?;
    let indices: Vec<usize> = args
        .indices
        .split(',')
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| Error::usage(format!("bad index {s:?}")))
        })
        .collect::<Result<_>>()?;
    report::recon_strip(&params, &data.x, data.sine_meta.as_deref(), &indices, &args.out)?;
    println!("wrote {}", args.out.display());
    Ok(())
}

fn cmd_check_grad(args: &CheckGradArgs) -> Result<()> {
    let cases = grad_check_suite(args.tolerance)?;
    let mut failed = 0;
    for c in &cases {
        println!(
            "check-grad {}: coords={} max_rel_err={:.3e} {}",
            c.name,
            c.report.coords_checked,
            c.report.max_rel_err,
            if c.report.passed() { "PASS" } else { "FAIL" }
        );
        if !c.report.passed() {
            failed += 1;
            for f in c.report.failures.iter().take(5) {
                println!(
                    "  param {} coord {}: analytic {:.6e} vs numeric {:.6e} (rel {:.3e})",
                    f.param_index, f.coord, f.analytic, f.numeric, f.rel_err
                );
            }
        }
    }
    if failed > 0 {
        return Err(Error::usage(format!(
            "gradient certification failed for {failed} of {} cases",
            cases.len()
        )));
    }
    Ok(())
}

fn cmd_check_kl(args: &CheckKlArgs) -> Result<()> {
    let trials = kl_certification(args.trials, args.samples, args.seed)?;
    println!("trial  M  d_z  upper_bound  mc_estimate  std_error  holds");
    let mut violations = 0;
    for (i, t) in trials.iter().enumerate() {
        if !t.holds() {
            violations += 1;
        }
        println!(
            "{:5}  {:1}  {:3}  {:11.6}  {:11.6}  {:9.6}  {}",
            i,
            t.m,
            t.d_z,
            t.upper_bound,
            t.mc_estimate,
            t.std_error,
            t.holds()
        );
    }
    let allowed = args.trials / 100;
    println!(
        "upper bound held in {} of {} trials (allowed violations: {allowed})",
        args.trials - violations,
        args.trials
    );
    if violations > allowed {
        return Err(Error::usage(format!(
            "KL upper-bound certification failed: {violations} violations in {} trials",
            args.trials
        )));
    }
    Ok(())
}

/// Row of the comparison summary.
struct CompareRow {
    name: &'static str,
    recon_error: f64,
    aevb_kl: f64,
    elbo_proxy: f64,
    oracle_gap: f64,
}

fn cmd_compare(args: &CompareArgs) -> Result<()> {
    let dataset_arg = args.data.dataset.unwrap_or(DatasetArg::Sine);
    let count = args.data.count.unwrap_or(match dataset_arg {
        DatasetArg::Sine => 20_000,
        _ => 10_000,
    });
    let kind = build_dataset_kind(dataset_arg, count, args.data.data_dir.as_deref(), args.data.limit)?;
    let eval_count = args.eval_count.unwrap_or(count / 10);
    let epochs = args.epochs.unwrap_or(match dataset_arg {
        DatasetArg::Sine => 20,
        _ => 10,
    });
    let batch_size = args.batch_size.unwrap_or(64);
    let arch = default_arch(dataset_arg, args.latent_dim)?;

    let objectives = [
        ObjectiveKind::wise_ale(),
        ObjectiveKind::aevb(),
        ObjectiveKind::beta_vae(args.beta)?,
    ];
    let mut rows = Vec::new();
    let mut curve_runs = Vec::new();
    for objective in objectives {
        let out_dir = args.out.join(objective.name());
        let config = RunConfig {
            dataset: kind.clone(),
            objective,
            arch: arch.clone(),
            optimizer: OptimizerKind::adam(args.lr.unwrap_or(1e-3)),
            batch_size,
            epochs,
            seed: args.seed,
            eval_count,
            out_dir: out_dir.clone(),
        };
        let echo = vec![
            ("dataset".into(), dataset_arg_name(dataset_arg).to_string()),
            ("count".into(), count.to_string()),
            ("objective".into(), objective.name().to_string()),
            ("beta".into(), args.beta.to_string()),
            ("latent-dim".into(), arch.d_z.to_string()),
            ("batch-size".into(), batch_size.to_string()),
            ("epochs".into(), epochs.to_string()),
            ("seed".into(), args.seed.to_string()),
            ("eval-count".into(), eval_count.to_string()),
            ("out".into(), out_dir.display().to_string()),
        ];
        write_resolved_config(&out_dir, &echo)?;
        let outcome = trainer::train(&config)?;
        let (x_eval, meta) = eval_rows(&kind, args.seed, eval_count)?;
        let rec = evaluate(&outcome.params, &x_eval, meta.as_deref(), args.seed)?;

        // reconstruction-approximation audit on the frozen checkpoint
        let audit_m = 8.min(x_eval.shape()[0]);
        let d = x_eval.shape()[1];
        let x_audit = crate::autodiff::DenseArray::from_vec(
            vec![audit_m, d],
            x_eval.data()[..audit_m * d].to_vec(),
        )?;
        let (means, log_vars) = outcome.params.encode_values(&x_audit)?;
        let post = crate::gaussian::GaussianBatch::new(means, log_vars)?;
        let params_ref = &outcome.params;
        let mut decode = |z: &crate::autodiff::DenseArray| params_ref.decode_values(z);
        let oracle = full_recon_oracle(&x_audit, &post, &mut decode, arch.likelihood, 64, args.seed)?;
        let simplified =
            simplified_recon_estimate(&x_audit, &post, &mut decode, arch.likelihood, 64, args.seed)?;
        if !oracle.is_finite() || !simplified.is_finite() {
            return Err(Error::usage(format!(
                "non-finite reconstruction audit for {}: oracle {oracle}, simplified {simplified}",
                objective.name()
            )));
        }

        rows.push(CompareRow {
            name: objective.name(),
            recon_error: rec.recon_error,
            aevb_kl: rec.aevb_kl,
            elbo_proxy: rec.elbo_proxy,
            oracle_gap: (oracle - simplified).abs(),
        });
        curve_runs.push((objective.name().to_string(), outcome.metrics));
    }

    report::training_curves(&curve_runs, 1, &args.out.join("curves.svg"))?;

    let mut table = String::from("objective,recon_error,aevb_kl,elbo_proxy,recon_oracle_gap\n");
    println!("objective   recon_error     aevb_kl    elbo_proxy  recon_oracle_gap");
    for r in &rows {
        let _ = writeln!(
            table,
            "{},{},{},{},{}",
            r.name, r.recon_error, r.aevb_kl, r.elbo_proxy, r.oracle_gap
        );
        println!(
            "{:<10} {:>12.6} {:>11.6} {:>13.6} {:>17.6}",
            r.name, r.recon_error, r.aevb_kl, r.elbo_proxy, r.oracle_gap
        );
    }
    let summary_path = args.out.join("summary.csv");
    std::fs::write(&summary_path, table)
        .map_err(|e| Error::io(summary_path.display().to_string(), e))?;
    println!("summary: {}", summary_path.display());
    Ok(())
}

const SUBCOMMANDS: &str =
    "gen-data, train, eval, embed, curves, recon, check-grad, check-kl, compare";

/// Parses `argv` and runs the selected subcommand.
pub fn run<I, T>(argv: I) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) if e.kind() == clap::error::ErrorKind::InvalidSubcommand => {
            eprint!("{e}");
            eprintln!("valid subcommands: {SUBCOMMANDS}");
            std::process::exit(2);
        }
        Err(e) => e.exit(),
    };
    match &cli.command {
        Command::GenData(a) => cmd_gen_data(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Embed(a) => cmd_embed(a),
        Command::Curves(a) => cmd_curves(a),
        Command::Recon(a) => cmd_recon(a),
        Command::CheckGrad(a) => cmd_check_grad(a),
        Command::CheckKl(a) => cmd_check_kl(a),
        Command::Compare(a) => cmd_compare(a),
    }
}
