//! `gethr`: synthesize datasets, train and evaluate fusion networks, learn
//! ensemble weights, run the baseline comparison and check gradients.

mod common;
mod compare;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gethr_core::data::{generate, save_dataset, GenConfig, Split, Task};
use gethr_core::fusionnet::{save_model, Topology};
use gethr_core::trainer::{
    grad_check, learn_combination_weights, predict_all, train_model_with, EpochReport, TinyConfig, ValMetric,
};
use serde::Serialize;

use common::{
    check_classes, evaluate_scores, load_train_config, open_dataset, print_config, split_of, write_predictions,
    EnsembleComponent, EnsembleFile, EvalMetric, Scorer, ENSEMBLE_FORMAT_VERSION,
};
use error::CliError;

#[derive(Parser)]
#[command(
    name = "gethr",
    version,
    about = "Temporally hybrid multimodal sequence classification"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory.
    Synth(SynthArgs),
    /// Train one topology and write the best-validation model.
    Train(TrainArgs),
    /// Evaluate a model or an ensemble on a split.
    Eval(EvalArgs),
    /// Learn simplex weights over component models on the validation split.
    Fuse(FuseArgs),
    /// Train and evaluate every baseline and print the comparison table.
    Compare(compare::CompareArgs),
    /// Compare analytic and finite-difference gradients for every topology.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Serialize)]
struct SynthArgs {
    #[arg(long)]
    task: Task,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    train: usize,
    #[arg(long)]
    val: usize,
    #[arg(long)]
    test: usize,
    #[arg(long)]
    length: usize,
    #[arg(long)]
    dim: usize,
    #[arg(long, default_value_t = gethr_core::data::DEFAULT_NOISE)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.0)]
    distractor_fraction: f64,
    /// Class count (the xor task always has 2).
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long, default_value_t = 2)]
    modalities: usize,
}

#[derive(Args, Serialize)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// hybrid | early | etoe | temporal:<modality> | nontemporal:<modality>
    #[arg(long = "model")]
    topology: Topology,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Layer-size preset (ucf101 | ccv | mmg) applied before the config file.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, conflicts_with = "ensemble", required_unless_present = "ensemble")]
    model: Option<PathBuf>,
    #[arg(long)]
    ensemble: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    split: Split,
    #[arg(long, default_value = "accuracy")]
    metric: EvalMetric,
    /// Sequences per stream for the edit metric.
    #[arg(long, default_value_t = 8)]
    stream_size: usize,
    /// Write per-sequence scores to this file.
    #[arg(long)]
    predictions: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct FuseArgs {
    #[arg(long)]
    data: PathBuf,
    /// Component model files, in order.
    #[arg(long = "component", required = true, num_args = 1..)]
    components: Vec<PathBuf>,
    #[arg(long, default_value = "accuracy")]
    metric: ValMetric,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Number of consecutive seeds to check.
    #[arg(long, default_value_t = 1)]
    seeds: u64,
    #[arg(long, default_value_t = 1e-5)]
    eps: f64,
}

/// Largest acceptable gradient-check error.
const GRADCHECK_TOLERANCE: f64 = 1e-4;

fn run_synth(args: &SynthArgs) -> Result<(), CliError> {
    print_config("synth", args);
    let num_classes = match args.task {
        Task::Xor => args.classes.unwrap_or(2),
        Task::Distractor => args.classes.unwrap_or(4),
    };
    let cfg = GenConfig {
        task: args.task,
        num_classes,
        modalities: args.modalities,
        train: args.train,
        val: args.val,
        test: args.test,
        length: args.length,
        dim: args.dim,
        noise: args.noise,
        distractor_fraction: args.distractor_fraction,
        seed: args.seed,
    };
    let dataset = generate(&cfg)?;
    save_dataset(&dataset, &args.out)?;
    for split in Split::ALL {
        println!("{split}\t{}", dataset.split(split).len());
    }
    println!("total\t{}", dataset.len());
    Ok(())
}

fn run_train(args: &TrainArgs) -> Result<(), CliError> {
    let config = load_train_config(args.config.as_deref(), args.preset.as_deref())?;
    print_config("train", args);
    print_config("train.config", &config);
    let dataset = open_dataset(&args.data)?;
    println!("{}", EpochReport::TSV_HEADER);
    let outcome = train_model_with(
        &dataset.train,
        &dataset.val,
        &dataset.schema,
        &args.topology,
        &config,
        |r| println!("{}", r.to_tsv()),
    )?;
    save_model(&outcome.model, &args.out).map_err(|e| CliError::Io(format!("{}: {e}", args.out.display())))?;
    let final_accuracy = outcome.reports.last().map_or(f64::NAN, |r| r.train_accuracy);
    match outcome.best_epoch {
        Some(e) => println!("# best_epoch = {e}"),
        None => println!("# best_epoch = none"),
    }
    println!("final_train_accuracy\t{final_accuracy:.4}");
    let val = evaluate_scores(
        &predict_all(&outcome.model, &dataset.val)?,
        &dataset.val,
        match config.val_metric {
            ValMetric::Accuracy => EvalMetric::Accuracy,
            ValMetric::Map => EvalMetric::Map,
        },
        1,
    )?;
    println!("val_{}\t{val:.4}", config.val_metric);
    Ok(())
}

fn run_eval(args: &EvalArgs) -> Result<(), CliError> {
    print_config("eval", args);
    let scorer = match (&args.model, &args.ensemble) {
        (Some(m), None) => Scorer::open_model(m)?,
        (None, Some(e)) => Scorer::open_ensemble(e)?,
        _ => return Err(CliError::Usage("pass exactly one of --model or --ensemble".into())),
    };
    let dataset = open_dataset(&args.data)?;
    check_classes(&dataset, scorer.classes())?;
    let seqs = split_of(&dataset, args.split);
    let scores = scorer.score(seqs)?;
    if let Some(path) = &args.predictions {
        write_predictions(path, scorer.classes(), seqs, &scores)?;
    }
    let value = evaluate_scores(&scores, seqs, args.metric, args.stream_size)?;
    println!("sequences\t{}", seqs.len());
    println!("{}\t{value:.6}", args.metric);
    Ok(())
}

fn run_fuse(args: &FuseArgs) -> Result<(), CliError> {
    print_config("fuse", args);
    let dataset = open_dataset(&args.data)?;
    let mut tables = Vec::new();
    for path in &args.components {
        let scorer = Scorer::open_model(path)?;
        check_classes(&dataset, scorer.classes())?;
        tables.push(scorer.score(&dataset.val)?);
    }
    let labels: Vec<usize> = dataset.val.iter().map(|s| s.label).collect();
    let weights = learn_combination_weights(&tables, &labels, args.metric)?;
    let file = EnsembleFile {
        format_version: ENSEMBLE_FORMAT_VERSION.to_string(),
        selection_metric: args.metric,
        components: args
            .components
            .iter()
            .zip(&weights)
            .map(|(p, &w)| EnsembleComponent {
                path: p.clone(),
                weight: w,
            })
            .collect(),
    };
    file.save(&args.out)?;
    for (p, w) in args.components.iter().zip(&weights) {
        println!("{}\t{w:.2}", p.display());
    }
    Ok(())
}

fn gradcheck_topologies() -> Vec<Topology> {
    let m = |i| gethr_core::data::modality_name(i);
    vec![
        Topology::Hybrid,
        Topology::Early,
        Topology::EtoeLate,
        Topology::Temporal(m(0)),
        Topology::Temporal(m(1)),
        Topology::NonTemporal(m(0)),
        Topology::NonTemporal(m(1)),
    ]
}

fn run_gradcheck(args: &GradcheckArgs) -> Result<(), CliError> {
    print_config("gradcheck", args);
    let tiny = TinyConfig::default();
    print_config("gradcheck.instance", &tiny);
    let mut worst: f64 = 0.0;
    println!("topology\tmax_relative_error");
    for topology in gradcheck_topologies() {
        let mut err: f64 = 0.0;
        for seed in args.seed..args.seed + args.seeds.max(1) {
            err = err.max(grad_check(&topology, &tiny, seed, args.eps)?);
        }
        println!("{topology}\t{err:.3e}");
        worst = worst.max(err);
    }
    if worst.is_nan() || worst >= GRADCHECK_TOLERANCE {
        return Err(CliError::Failed(format!(
            "gradient check failed: max relative error {worst:.3e} ≥ {GRADCHECK_TOLERANCE:e}"
        )));
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Synth(a) => run_synth(a),
        Command::Train(a) => run_train(a),
        Command::Eval(a) => run_eval(a),
        Command::Fuse(a) => run_fuse(a),
        Command::Compare(a) => compare::run(a),
        Command::Gradcheck(a) => run_gradcheck(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
