//! The baseline comparison: every single-modality, fusion and combined
//! method trained on one dataset and scored on its test split.

use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use clap::Args;
use gethr_core::data::Dataset;
use gethr_core::fusionnet::{Model, Topology};
use gethr_core::numerics::ScoreVector;
use gethr_core::trainer::{learn_combination_weights, predict_all, topology_seed, train_model, TrainConfig};
use serde::Serialize;

use crate::common::{combine_per_sequence, evaluate_scores, load_train_config, open_dataset, print_config, EvalMetric};
use crate::error::CliError;

#[derive(Args, Serialize)]
pub struct CompareArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    preset: Option<String>,
    #[arg(long, default_value = "accuracy")]
    metric: EvalMetric,
    /// Master seed; every row trains from a seed derived from it and the
    /// topology name.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 8)]
    stream_size: usize,
    /// Worker threads (defaults to the available parallelism).
    #[arg(long)]
    threads: Option<usize>,
}

struct Trained {
    topology: Topology,
    best_epoch: Option<usize>,
    val: Vec<ScoreVector>,
    test: Vec<ScoreVector>,
}

fn train_all(
    dataset: &Dataset,
    config: &TrainConfig,
    jobs: &[Topology],
    master: u64,
    threads: usize,
) -> Result<Vec<Trained>, CliError> {
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<Trained, CliError>>>> = Mutex::new((0..jobs.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..threads.clamp(1, jobs.len().max(1)) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(topology) = jobs.get(i) else { break };
                let run = || -> Result<Trained, CliError> {
                    let cfg = TrainConfig {
                        seed: topology_seed(master, topology),
                        ..config.clone()
                    };
                    let outcome = train_model(&dataset.train, &dataset.val, &dataset.schema, topology, &cfg)?;
                    let model: &Model = &outcome.model;
                    Ok(Trained {
                        topology: topology.clone(),
                        best_epoch: outcome.best_epoch,
                        val: predict_all(model, &dataset.val)?,
                        test: predict_all(model, &dataset.test)?,
                    })
                };
                let result = run();
                slots.lock().expect("no worker panicked")[i] = Some(result);
            });
        }
    });
    slots
        .into_inner()
        .expect("no worker panicked")
        .into_iter()
        .map(|r| r.expect("every job ran"))
        .collect()
}

struct Row {
    label: &'static str,
    method: &'static str,
    value: f64,
    detail: String,
}

fn format_weights(w: &[f64]) -> String {
    let cells: Vec<String> = w.iter().map(|x| format!("{x:.2}")).collect();
    format!("weights={}", cells.join(","))
}

pub fn run(args: &CompareArgs) -> Result<(), CliError> {
    let mut config = load_train_config(args.config.as_deref(), args.preset.as_deref())?;
    config.val_metric = args.metric.selection();
    print_config("compare", args);
    print_config("compare.config", &config);
    let dataset = open_dataset(&args.data)?;
    if dataset.test.is_empty() {
        return Err(CliError::UndefinedMetric("test split is empty".into()));
    }
    let names: Vec<String> = dataset.schema.modalities.iter().map(|m| m.name.clone()).collect();
    let mut jobs: Vec<Topology> = names.iter().map(|m| Topology::NonTemporal(m.clone())).collect();
    jobs.extend(names.iter().map(|m| Topology::Temporal(m.clone())));
    jobs.extend([Topology::Early, Topology::EtoeLate, Topology::Hybrid]);
    let threads = args
        .threads
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    let trained = train_all(&dataset, &config, &jobs, args.seed, threads)?;
    for t in &trained {
        let best = t.best_epoch.map_or("none".to_string(), |e| e.to_string());
        println!("# trained {} best_epoch = {best}", t.topology);
    }

    let m = names.len();
    let frame = &trained[..m];
    let temporal = &trained[m..2 * m];
    let [early, etoe, hybrid] = [&trained[2 * m], &trained[2 * m + 1], &trained[2 * m + 2]];
    let metric = args.metric;
    let test_value = |scores: &[ScoreVector]| evaluate_scores(scores, &dataset.test, metric, args.stream_size);
    let val_labels: Vec<usize> = dataset.val.iter().map(|s| s.label).collect();
    let best_of = |values: &[f64]| -> f64 {
        let pick = if metric.lower_is_better() { f64::min } else { f64::max };
        values.iter().copied().reduce(pick).unwrap_or(f64::NAN)
    };

    let per_modality = |group: &[Trained]| -> Result<(f64, String), CliError> {
        let values = group
            .iter()
            .map(|t| test_value(&t.test))
            .collect::<Result<Vec<_>, _>>()?;
        let detail: Vec<String> = names.iter().zip(&values).map(|(n, v)| format!("{n}={v:.4}")).collect();
        Ok((best_of(&values), detail.join(",")))
    };
    let fused = |group: &[&Trained]| -> Result<(f64, String), CliError> {
        let val: Vec<Vec<ScoreVector>> = group.iter().map(|t| t.val.clone()).collect();
        let weights = learn_combination_weights(&val, &val_labels, metric.selection())?;
        let test: Vec<Vec<ScoreVector>> = group.iter().map(|t| t.test.clone()).collect();
        let combined = combine_per_sequence(&test, &weights)?;
        Ok((test_value(&combined)?, format_weights(&weights)))
    };
    let single = |t: &Trained| -> Result<(f64, String), CliError> { Ok((test_value(&t.test)?, "-".to_string())) };

    let frame_refs: Vec<&Trained> = frame.iter().collect();
    let temporal_refs: Vec<&Trained> = temporal.iter().collect();
    let all_refs: Vec<&Trained> = temporal.iter().chain(frame).collect();
    let gethr_refs: Vec<&Trained> = std::iter::once(hybrid).chain(frame).collect();

    let rows = [
        ("(a)", "NonTemporal-M", per_modality(frame)?),
        ("(b)", "Temporal-M", per_modality(temporal)?),
        ("(c)", "NonTemporal-AM", fused(&frame_refs)?),
        ("(d)", "Temporal-AM (late fusion)", fused(&temporal_refs)?),
        ("(e)", "TemporalEtoE-AM (late fusion)", single(etoe)?),
        ("(f)", "Temporal-AM (early fusion)", single(early)?),
        ("(g)", "Temporal-AM+NonTemporal-AM", fused(&all_refs)?),
        ("(h)", "TemporallyHybrid-AM", single(hybrid)?),
        ("(i)", "GeThR-Net", fused(&gethr_refs)?),
    ]
    .map(|(label, method, (value, detail))| Row {
        label,
        method,
        value,
        detail,
    });

    println!("row\tmethod\t{metric}\tdetail");
    for r in &rows {
        println!("{}\t{}\t{:.4}\t{}", r.label, r.method, r.value, r.detail);
    }
    Ok(())
}
